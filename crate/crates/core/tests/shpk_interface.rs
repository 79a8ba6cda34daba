//! Packs as an external producer writes them: hand-assembled bytes with a
//! space-padded header and payloads stored out of header order.

use serde_json::json;
use shiftlab_core::shiftpack::{read_pack, validate_pack, Role};
use shiftlab_core::{RuleParams, RuleSpec, Scorer};

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn i64_bytes(v: &[i64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Header padded to a multiple of 64 bytes; tensors placed back to back in
/// the order given, which need not match the header order.
fn encode(role: &str, classes: usize, entries: &[(&str, &str, Vec<usize>, Vec<u8>)], payload_order: &[usize]) -> Vec<u8> {
    // The header length depends on the offsets' digit counts, so iterate.
    let mut header_len = 0usize;
    loop {
        let mut offset = 16 + header_len;
        let mut offsets = vec![0; entries.len()];
        for &i in payload_order {
            offsets[i] = offset;
            offset += entries[i].3.len();
        }
        let tensors: Vec<_> = entries
            .iter()
            .zip(&offsets)
            .map(|((name, dtype, shape, _), off)| json!({"name": name, "dtype": dtype, "shape": shape, "offset": off}))
            .collect();
        let mut header = serde_json::to_vec(&json!({
            "role": role,
            "class_count": classes,
            "metadata": {"producer": "hand"},
            "tensors": tensors,
        }))
        .unwrap();
        let padded = header.len().div_ceil(64) * 64;
        if padded != header_len {
            header_len = padded;
            continue;
        }
        header.resize(padded, b' ');
        let mut out = Vec::new();
        out.extend_from_slice(b"SHPK");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(padded as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &i in payload_order {
            out.extend_from_slice(&entries[i].3);
        }
        return out;
    }
}

#[test]
fn hand_encoded_pack_reads_back() {
    let logits = [2.0f32, -1.0, 0.5, 0.0, 3.0, 1.0];
    let feats = [1.0f32, 0.0, 2.0, 0.5, 0.25, 4.0, 0.0, 1.5];
    let weight = [1.0f32, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
    let bias = [0.0f32, 0.1, -0.1];
    let entries = vec![
        ("logits", "float32", vec![2, 3], f32_bytes(&logits)),
        ("labels", "int64", vec![2], i64_bytes(&[0, 1])),
        ("features/block4", "float32", vec![2, 4], f32_bytes(&feats)),
        ("fc.weight", "float32", vec![3, 4], f32_bytes(&weight)),
        ("fc.bias", "float32", vec![3], f32_bytes(&bias)),
    ];
    let bytes = encode("id_test", 3, &entries, &[4, 2, 0, 3, 1]);
    let pack = read_pack(bytes.as_slice()).unwrap();

    assert_eq!(pack.role, Role::IdTest);
    assert_eq!(pack.class_count, 3);
    assert_eq!(pack.metadata.get("producer").map(String::as_str), Some("hand"));
    assert!(validate_pack(&pack).is_empty());
    assert_eq!(pack.labels().unwrap(), vec![0, 1]);
    let l = pack.logits().unwrap();
    assert_eq!(l.as_slice().unwrap(), logits.map(f64::from).as_slice());
    assert_eq!(pack.penultimate_name(), Some("features/block4"));
    assert_eq!(pack.penultimate_features().unwrap()[[1, 3]], 1.5);

    let mls = Scorer::fit("mls".parse::<RuleSpec>().unwrap(), RuleParams::default(), &pack).unwrap();
    assert_eq!(mls.score(&pack).unwrap().values, vec![2.0, 3.0]);
}

#[test]
fn hand_encoded_pack_with_bad_offset_is_rejected() {
    let entries = vec![("logits", "float32", vec![2, 2], f32_bytes(&[1.0, 2.0, 3.0, 4.0]))];
    let mut bytes = encode("ood_test", 2, &entries, &[0]);
    bytes.truncate(bytes.len() - 4);
    assert!(read_pack(bytes.as_slice()).is_err());
}
