use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use protoscope_core::embednet::{total_loss, MappingNet, ProxyBank};
use protoscope_core::numkit::seeded_rng;
use protoscope_core::pwnet::{class_identity_weights, PWNetHead, Slot};
use protoscope_core::{build_charts, make_planes_fixture, pairwise_similarity, Matrix, SimilarityParams, Stage1Config};
use rand::Rng;
use rand_distr::StandardNormal;

fn batch(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let fx = make_planes_fixture(3, n.div_ceil(3), 10, 0.01, 1).unwrap();
    let rows = &fx.dataset.rows[..n];
    (rows.iter().map(|r| r.z.clone()).collect(), rows.iter().map(|r| r.label).collect())
}

fn charts(c: &mut Criterion) {
    let params = SimilarityParams::default();
    let mut g = c.benchmark_group("build_charts");
    for n in [64, 128] {
        let (zs, _) = batch(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &zs, |b, zs| {
            b.iter(|| build_charts(black_box(zs), &params, 3).unwrap())
        });
    }
    g.finish();
}

fn similarity(c: &mut Criterion) {
    let params = SimilarityParams::default();
    let mut g = c.benchmark_group("pairwise_similarity");
    for n in [64, 128] {
        let (zs, _) = batch(n);
        let cs = build_charts(&zs, &params, 3).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &zs, |b, zs| {
            b.iter(|| pairwise_similarity(black_box(zs), &cs, &params).unwrap())
        });
    }
    g.finish();
}

fn loss(c: &mut Criterion) {
    let params = SimilarityParams::default();
    let (zs, labels) = batch(128);
    let s = pairwise_similarity(&zs, &build_charts(&zs, &params, 3).unwrap(), &params).unwrap();
    let mut rng = seeded_rng(2);
    let net = MappingNet::init(10, 50, &mut rng);
    let bank = ProxyBank::init(3, 1, 50, 0.999, &mut rng);
    let cfg = Stage1Config::default().loss_config();
    c.bench_function("total_loss/128", |b| {
        b.iter(|| total_loss(&net, &bank, black_box(&zs), &labels, &s, &cfg).unwrap())
    });
}

fn head(c: &mut Criterion) {
    let mut rng = seeded_rng(4);
    let (k, a, d_z, p) = (6, 2, 8, 50);
    let slots = (0..k)
        .map(|_| Slot {
            projection: Matrix::from_vec(p, d_z, (0..p * d_z).map(|_| rng.sample(StandardNormal)).collect()).unwrap(),
            prototype_embedding: (0..p).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let classes: Vec<usize> = (0..k).map(|j| j % a).collect();
    let h = PWNetHead::new(slots, class_identity_weights(a, &classes), 1e-5).unwrap();
    let z: Vec<f64> = (0..d_z).map(|_| rng.sample(StandardNormal)).collect();
    c.bench_function("wrap_forward/6x50", |b| b.iter(|| h.wrap_forward(black_box(&z)).unwrap()));
}

criterion_group!(benches, charts, similarity, loss, head);
criterion_main!(benches);
