use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use shiftlab_bench::{gaussian_rows, labels, tied_scores};
use shiftlab_core::proximity::{dist_nn, mmd_u, FeatureSet, KernelConfig};
use shiftlab_core::toynet::{one_hot, Objective};
use shiftlab_core::{auroc, Mlp};

fn bench_auroc(c: &mut Criterion) {
    let mut g = c.benchmark_group("auroc");
    for n in [1_000, 10_000, 100_000] {
        let id = tied_scores(n, 0.1, 1);
        let ood = tied_scores(n, 0.0, 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| auroc(&id, &ood).unwrap()));
    }
    g.finish();
}

fn bench_dist_nn(c: &mut Criterion) {
    let mut g = c.benchmark_group("dist_nn");
    g.sample_size(20);
    for n in [500, 2_000] {
        let ood = FeatureSet::normalize(gaussian_rows(n, 64, 0.0, 3).view(), "ood").unwrap();
        let aux = FeatureSet::normalize(gaussian_rows(n, 64, 0.5, 4).view(), "aux").unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| dist_nn(&ood, &aux, 10).unwrap()));
    }
    g.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let mut g = c.benchmark_group("mmd_u");
    g.sample_size(20);
    let cfg = KernelConfig::default();
    for n in [200, 1_000] {
        let x = gaussian_rows(n, 32, 0.0, 5);
        let y = gaussian_rows(n, 32, 0.2, 6);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| mmd_u(x.view(), y.view(), &cfg).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let model = Mlp::new(&[16, 64, 64, 6], 7).unwrap();
    let x = gaussian_rows(64, 16, 0.0, 8);
    let t = one_hot(&labels(64, 6, 9), 6);
    let aux = gaussian_rows(64, 16, 3.0, 10);
    let y = labels(64, 6, 9);
    let ce = Objective { x: x.view(), targets: t.view(), labels: &y, aux: None, oe_lambda: 0.0, arpl_lambda: 0.0 };
    let oe = Objective { aux: Some(aux.view()), oe_lambda: 0.5, ..ce };
    c.bench_function("loss_and_grad/ce_batch64", |b| b.iter(|| model.loss_and_grad(&ce)));
    c.bench_function("loss_and_grad/oe_batch64", |b| b.iter(|| model.loss_and_grad(&oe)));
}

criterion_group!(benches, bench_auroc, bench_dist_nn, bench_mmd, bench_train_step);
criterion_main!(benches);
