//! The `.shpk` tensor dump format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `SHPK`                              |
//! | 4..8         | format version, `u32` (currently 1)       |
//! | 8..16        | header byte length, `u64`                 |
//! | 16..16+len   | UTF-8 JSON header (tensor index, metadata)|
//! | rest         | raw row-major payloads                    |
//!
//! Offsets recorded in the header are absolute file offsets. Float tensors are
//! IEEE-754 `f32`, integer tensors `i64`. Labels use `-1` for samples with no
//! valid closed-set class.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SHPK";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: u64 = 16;

pub const LOGITS: &str = "logits";
pub const LABELS: &str = "labels";
pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";
pub const PERTURBED_LOGITS: &str = "perturbed_logits";
pub const FEATURES_PREFIX: &str = "features/";

/// Metadata key marking a reciprocal-point head, whose logits equal
/// `W·f + b + ‖f‖²` rather than the plain affine map.
pub const META_HEAD: &str = "head";
pub const HEAD_RECIPROCAL: &str = "reciprocal";

/// Which split of an experiment a pack holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    IdTrain,
    IdTest,
    OodTest,
    CovariateTest,
    AuxTrain,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::IdTrain,
        Role::IdTest,
        Role::OodTest,
        Role::CovariateTest,
        Role::AuxTrain,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::IdTrain => "id_train",
            Role::IdTest => "id_test",
            Role::OodTest => "ood_test",
            Role::CovariateTest => "covariate_test",
            Role::AuxTrain => "aux_train",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown pack role '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Int64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::Float32 => 4,
            DType::Int64 => 8,
        }
    }
}

#[derive(Debug, Clone)]
pub enum TensorData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::Float32,
            TensorData::I64(_) => DType::Int64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Float payloads compare by bit pattern so round-trips are checked exactly.
impl PartialEq for TensorData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

/// A named tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.element_count() * self.dtype().size()
    }
}

/// One entry of the header index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    role: Role,
    class_count: usize,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorRecord>,
}

/// A dump of the tensors a post-hoc scoring rule needs for one dataset split.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftPack {
    pub version: u32,
    pub role: Role,
    pub class_count: usize,
    pub tensors: Vec<Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl ShiftPack {
    pub fn new(role: Role, class_count: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            role,
            class_count,
            tensors: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a tensor, keeping insertion order otherwise.
    pub fn insert(&mut self, tensor: Tensor) {
        if let Some(slot) = self.tensors.iter_mut().find(|t| t.name == tensor.name) {
            *slot = tensor;
        } else {
            self.tensors.push(tensor);
        }
    }

    pub fn insert_f32(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) {
        self.insert(Tensor {
            name: name.to_string(),
            shape,
            data: TensorData::F32(data),
        });
    }

    /// Stores a matrix as `float32`.
    pub fn insert_matrix(&mut self, name: &str, m: &Array2<f64>) {
        let data = m.iter().map(|&v| v as f32).collect();
        self.insert_f32(name, vec![m.nrows(), m.ncols()], data);
    }

    pub fn insert_vector(&mut self, name: &str, v: &[f64]) {
        let data = v.iter().map(|&x| x as f32).collect();
        self.insert_f32(name, vec![v.len()], data);
    }

    pub fn insert_labels(&mut self, labels: &[i64]) {
        self.insert(Tensor {
            name: LABELS.to_string(),
            shape: vec![labels.len()],
            data: TensorData::I64(labels.to_vec()),
        });
    }

    pub fn with_metadata(mut self, key: &str, value: impl Into<String>) -> Self {
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Reads a 2-D float tensor widened to `f64`.
    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.require(name)?;
        let (TensorData::F32(data), [rows, cols]) = (&t.data, t.shape.as_slice()) else {
            return Err(Error::ShapeMismatch(format!(
                "'{name}' is not a 2-D float32 tensor (shape {:?})",
                t.shape
            )));
        };
        let wide = data.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((*rows, *cols), wide)
            .map_err(|e| Error::ShapeMismatch(format!("'{name}': {e}")))
    }

    /// Reads a 1-D float tensor widened to `f64`.
    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.require(name)?;
        match (&t.data, t.shape.len()) {
            (TensorData::F32(data), 1) => Ok(data.iter().map(|&v| v as f64).collect()),
            _ => Err(Error::ShapeMismatch(format!(
                "'{name}' is not a 1-D float32 tensor (shape {:?})",
                t.shape
            ))),
        }
    }

    pub fn logits(&self) -> Result<Array2<f64>> {
        self.matrix(LOGITS)
    }

    pub fn labels(&self) -> Result<Vec<i64>> {
        let t = self.require(LABELS)?;
        match &t.data {
            TensorData::I64(v) => Ok(v.clone()),
            TensorData::F32(_) => Err(Error::ShapeMismatch("'labels' must be int64".into())),
        }
    }

    /// Names of the `features/*` tensors, in pack order.
    pub fn feature_layers(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| t.name.starts_with(FEATURES_PREFIX))
            .map(|t| t.name.as_str())
            .collect()
    }

    /// Name of the penultimate feature tensor: the last `features/*` tensor
    /// whose width matches `fc.weight`, or the last one when no head is stored.
    pub fn penultimate_name(&self) -> Option<&str> {
        let head_dim = self.get(FC_WEIGHT).and_then(|w| w.shape.get(1).copied());
        self.tensors
            .iter()
            .rev()
            .filter(|t| t.name.starts_with(FEATURES_PREFIX) && t.shape.len() == 2)
            .find(|t| head_dim.is_none_or(|d| t.shape[1] == d))
            .map(|t| t.name.as_str())
    }

    pub fn penultimate_features(&self) -> Result<Array2<f64>> {
        let name = self
            .penultimate_name()
            .ok_or_else(|| Error::MissingTensor("features/*".into()))?;
        self.matrix(name)
    }

    /// Whether logits come from a reciprocal-point (distance) head.
    pub fn has_reciprocal_head(&self) -> bool {
        self.metadata.get(META_HEAD).map(String::as_str) == Some(HEAD_RECIPROCAL)
    }

    /// Sample count, taken from the first per-sample tensor present.
    pub fn sample_count(&self) -> Option<usize> {
        self.tensors
            .iter()
            .find(|t| is_per_sample(&t.name))
            .and_then(|t| t.shape.first().copied())
    }
}

fn is_per_sample(name: &str) -> bool {
    name == LOGITS
        || name == LABELS
        || name == PERTURBED_LOGITS
        || name.starts_with(FEATURES_PREFIX)
}

/// Checks every pack invariant; returns one message per violation.
pub fn validate_pack(pack: &ShiftPack) -> Vec<String> {
    let mut violations = Vec::new();
    let c = pack.class_count;

    let mut seen = HashSet::new();
    for t in &pack.tensors {
        if !seen.insert(t.name.as_str()) {
            violations.push(format!("duplicate tensor name '{}'", t.name));
        }
        if t.data.len() != t.element_count() {
            violations.push(format!(
                "tensor '{}': payload has {} elements but shape {:?} needs {}",
                t.name,
                t.data.len(),
                t.shape,
                t.element_count()
            ));
        }
        if let TensorData::F32(v) = &t.data {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                violations.push(format!(
                    "tensor '{}': non-finite value at index {i}",
                    t.name
                ));
            }
        }
    }

    let mut sample_axes: Vec<(&str, usize)> = Vec::new();

    for name in [LOGITS, PERTURBED_LOGITS] {
        if let Some(t) = pack.get(name) {
            if t.dtype() != DType::Float32 || t.shape.len() != 2 {
                violations.push(format!(
                    "'{name}' must be float32 [N, C], got {:?}",
                    t.shape
                ));
            } else {
                if t.shape[1] != c {
                    violations.push(format!(
                        "'{name}' has {} columns but class_count is {c}",
                        t.shape[1]
                    ));
                }
                sample_axes.push((name, t.shape[0]));
            }
        }
    }

    if let Some(t) = pack.get(LABELS) {
        match (&t.data, t.shape.len()) {
            (TensorData::I64(v), 1) => {
                sample_axes.push((LABELS, t.shape[0]));
                if let Some(bad) = v.iter().find(|&&l| l < -1 || l >= c as i64) {
                    violations.push(format!(
                        "'labels' value {bad} outside {{-1}} ∪ [0, {}]",
                        c as i64 - 1
                    ));
                }
            }
            _ => violations.push(format!("'labels' must be int64 [N], got {:?}", t.shape)),
        }
    }

    for t in pack
        .tensors
        .iter()
        .filter(|t| t.name.starts_with(FEATURES_PREFIX))
    {
        if t.dtype() != DType::Float32 || t.shape.is_empty() {
            violations.push(format!(
                "'{}' must be a float32 tensor with a sample axis",
                t.name
            ));
        } else {
            sample_axes.push((&t.name, t.shape[0]));
        }
    }

    if let Some(&(first, n)) = sample_axes.first() {
        for &(name, m) in &sample_axes[1..] {
            if m != n {
                violations.push(format!(
                    "tensor '{name}' has {m} samples but '{first}' has {n}"
                ));
            }
        }
    }

    if let Some(w) = pack.get(FC_WEIGHT) {
        if w.dtype() != DType::Float32 || w.shape.len() != 2 || w.shape[0] != c {
            violations.push(format!(
                "'fc.weight' must be float32 [{c}, D], got {:?}",
                w.shape
            ));
        } else {
            let d = w.shape[1];
            let has_features = !pack.feature_layers().is_empty();
            let matched = pack.tensors.iter().any(|t| {
                t.name.starts_with(FEATURES_PREFIX) && t.shape.len() == 2 && t.shape[1] == d
            });
            if has_features && !matched {
                violations.push(format!(
                    "'fc.weight' input width {d} matches no features/* tensor"
                ));
            }
        }
    }
    if let Some(b) = pack.get(FC_BIAS) {
        if b.dtype() != DType::Float32 || b.shape != [c] {
            violations.push(format!(
                "'fc.bias' must be float32 [{c}], got {:?}",
                b.shape
            ));
        }
    }

    violations
}

fn build_header(pack: &ShiftPack, header_len: u64) -> Header {
    let mut offset = PREAMBLE_LEN + header_len;
    let tensors = pack
        .tensors
        .iter()
        .map(|t| {
            let rec = TensorRecord {
                name: t.name.clone(),
                dtype: t.dtype(),
                shape: t.shape.clone(),
                offset,
            };
            offset += t.byte_len() as u64;
            rec
        })
        .collect();
    Header {
        role: pack.role,
        class_count: pack.class_count,
        metadata: pack.metadata.clone(),
        tensors,
    }
}

/// Serializes the header so that its own length is consistent with the
/// absolute offsets it records. Trailing spaces pad it to the reserved size.
fn encode_header(pack: &ShiftPack) -> Result<Vec<u8>> {
    let mut reserved = 0u64;
    loop {
        let bytes = serde_json::to_vec(&build_header(pack, reserved))
            .map_err(|e| Error::Header(e.to_string()))?;
        let len = bytes.len() as u64;
        if len <= reserved {
            let mut bytes = bytes;
            bytes.resize(reserved as usize, b' ');
            return Ok(bytes);
        }
        reserved = len.next_multiple_of(8);
    }
}

/// Writes a pack; invariants are checked before any byte is emitted.
pub fn write_pack<W: Write>(pack: &ShiftPack, mut sink: W) -> Result<()> {
    let violations = validate_pack(pack);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    let header = encode_header(pack)?;

    let mut buf = Vec::with_capacity(
        PREAMBLE_LEN as usize
            + header.len()
            + pack.tensors.iter().map(Tensor::byte_len).sum::<usize>(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&pack.version.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in &pack.tensors {
        match &t.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v
                .iter()
                .for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

pub fn read_pack<R: Read>(mut source: R) -> Result<ShiftPack> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_pack(&bytes)
}

fn decode_pack(bytes: &[u8]) -> Result<ShiftPack> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic(found));
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < PREAMBLE_LEN as usize {
        return Err(Error::Header(
            "file shorter than the 16-byte preamble".into(),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version == 0 || version > FORMAT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = PREAMBLE_LEN
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::Header(format!("header length {header_len} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN as usize..header_end as usize])
        .map_err(|e| Error::Header(e.to_string()))?;

    let mut pack = ShiftPack {
        version,
        role: header.role,
        class_count: header.class_count,
        tensors: Vec::with_capacity(header.tensors.len()),
        metadata: header.metadata,
    };
    for rec in header.tensors {
        let count: usize = rec.shape.iter().product();
        let declared = (count * rec.dtype.size()) as u64;
        let available = (bytes.len() as u64).saturating_sub(rec.offset);
        if rec.offset < header_end || available < declared {
            return Err(Error::Truncated {
                tensor: rec.name,
                declared,
                available: if rec.offset < header_end {
                    0
                } else {
                    available
                },
            });
        }
        let payload = &bytes[rec.offset as usize..(rec.offset + declared) as usize];
        let data = match rec.dtype {
            DType::Float32 => {
                let v: Vec<f32> = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        tensor: rec.name,
                        index,
                    });
                }
                TensorData::F32(v)
            }
            DType::Int64 => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        pack.tensors.push(Tensor {
            name: rec.name,
            shape: rec.shape,
            data,
        });
    }

    let violations = validate_pack(&pack);
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    Ok(pack)
}

/// Reads only the header index (shapes, dtypes, offsets) of a pack file.
pub fn read_index(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    if bytes.len() < PREAMBLE_LEN as usize || &bytes[0..4] != MAGIC {
        return Err(Error::Header("not a shiftpack".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = PREAMBLE_LEN as usize + header_len;
    if end > bytes.len() {
        return Err(Error::Header("header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN as usize..end])
        .map_err(|e| Error::Header(e.to_string()))?;
    Ok(header.tensors)
}

pub fn read_pack_file(path: impl AsRef<Path>) -> Result<ShiftPack> {
    let path = path.as_ref();
    let bytes = fs::read(path)
        .map_err(|e| io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    decode_pack(&bytes)
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_pack_file(pack: &ShiftPack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_pack(pack, &mut buf)?;
    let tmp = path.with_extension("shpk.tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits_pack() -> ShiftPack {
        let mut p = ShiftPack::new(Role::IdTest, 3);
        p.insert_f32(LOGITS, vec![2, 3], vec![0.0; 6]);
        p
    }

    fn to_bytes(p: &ShiftPack) -> Vec<u8> {
        let mut buf = Vec::new();
        write_pack(p, &mut buf).unwrap();
        buf
    }

    #[test]
    fn zero_logits_round_trip() {
        let p = logits_pack();
        let back = read_pack(to_bytes(&p).as_slice()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn preamble_layout() {
        let p = logits_pack().with_metadata("dataset", "toy");
        let bytes = to_bytes(&p);
        assert_eq!(&bytes[0..4], b"SHPK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let index = read_index(&bytes).unwrap();
        assert_eq!(index.len(), 1);
        assert_eq!(index[0].offset as usize, 16 + hlen);
        assert_eq!(index[0].shape, vec![2, 3]);
        assert_eq!(bytes.len(), 16 + hlen + 24);
    }

    #[test]
    fn out_of_range_label_rejected_before_writing() {
        let mut p = logits_pack();
        p.insert_labels(&[0, 3]);
        let mut buf = Vec::new();
        let err = write_pack(&p, &mut buf).unwrap_err();
        assert!(matches!(err, Error::Validation(ref v) if v.len() == 1 && v[0].contains("labels")));
        assert!(buf.is_empty());
    }

    #[test]
    fn head_consistent_with_features_accepted() {
        let mut p = ShiftPack::new(Role::IdTest, 3);
        p.insert_f32("features/pen", vec![4, 8], vec![0.5; 32]);
        p.insert_f32(FC_WEIGHT, vec![3, 8], vec![0.1; 24]);
        p.insert_f32(FC_BIAS, vec![3], vec![0.0; 3]);
        assert!(validate_pack(&p).is_empty());
        assert_eq!(read_pack(to_bytes(&p).as_slice()).unwrap(), p);
    }

    #[test]
    fn bad_magic() {
        let err = read_pack(&b"XXXXrest-of-file"[..]).unwrap_err();
        assert!(matches!(err, Error::BadMagic(m) if &m == b"XXXX"));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = to_bytes(&logits_pack());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            read_pack(bytes.as_slice()).unwrap_err(),
            Error::UnsupportedVersion { found: 2, .. }
        ));
    }

    #[test]
    fn truncated_payload() {
        let bytes = to_bytes(&logits_pack());
        let cut = &bytes[..bytes.len() - 4];
        match read_pack(cut).unwrap_err() {
            Error::Truncated {
                declared,
                available,
                ..
            } => {
                assert_eq!(declared, 24);
                assert_eq!(available, 20);
            }
            e => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = to_bytes(&logits_pack());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_pack(bytes.as_slice()).unwrap_err(),
            Error::NonFinite { index: 5, .. }
        ));
    }

    #[test]
    fn class_count_mismatch_is_one_violation() {
        let mut p = logits_pack();
        p.class_count = 4;
        assert_eq!(validate_pack(&p).len(), 1);
    }

    #[test]
    fn duplicate_names_is_one_violation() {
        let mut p = logits_pack();
        p.tensors.push(p.tensors[0].clone());
        let v = validate_pack(&p);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].contains("duplicate"));
    }

    #[test]
    fn well_formed_pack_has_no_violations() {
        let mut p = logits_pack();
        p.insert_labels(&[-1, 2]);
        p.insert_f32("features/a", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert!(validate_pack(&p).is_empty());
    }

    #[test]
    fn mismatched_sample_counts() {
        let mut p = logits_pack();
        p.insert_f32("features/a", vec![3, 2], vec![0.0; 6]);
        assert_eq!(validate_pack(&p).len(), 1);
    }

    #[test]
    fn penultimate_prefers_head_width() {
        let mut p = ShiftPack::new(Role::IdTest, 2);
        p.insert_f32("features/layer_1", vec![1, 4], vec![0.0; 4]);
        p.insert_f32("features/layer_2", vec![1, 3], vec![0.0; 3]);
        p.insert_f32("features/input", vec![1, 5], vec![0.0; 5]);
        assert_eq!(p.penultimate_name(), Some("features/input"));
        p.insert_f32(FC_WEIGHT, vec![2, 3], vec![0.0; 6]);
        assert_eq!(p.penultimate_name(), Some("features/layer_2"));
    }
}
