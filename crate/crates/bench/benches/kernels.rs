use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meshvae_bench::desk_corpus;
use meshvae_core::analysis::metric_chamfer;
use meshvae_core::autodiff::{Tape, Tensor};
use meshvae_core::pooling::{build_hierarchy, qem_simplify};
use meshvae_core::procaug::{procrustes_rotation, ProcrustesOptions};
use meshvae_core::spectral::ChebLayer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn chebyshev(c: &mut Criterion) {
    let mesh = &desk_corpus(1)[0];
    let h = build_hierarchy(mesh, 1, 4.0).unwrap();
    let lap = Arc::clone(&h.laplacians[0]);
    let mut group = c.benchmark_group("cheb_forward");
    for k in [1, 3, 6] {
        let layer = ChebLayer::new(Arc::clone(&lap), k, 32, 32, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::filled(mesh.num_vertices(), 32, 0.5);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let xv = tape.constant(x.clone());
                black_box(layer.forward(&mut tape, xv).unwrap());
            })
        });
    }
    group.finish();
}

fn chamfer(c: &mut Criterion) {
    let corpus = desk_corpus(2);
    c.bench_function("chamfer_642", |b| {
        b.iter(|| metric_chamfer(black_box(corpus[0].vertices()), black_box(corpus[1].vertices())).unwrap())
    });
}

fn procrustes(c: &mut Criterion) {
    let corpus = desk_corpus(2);
    let opts = ProcrustesOptions::default();
    c.bench_function("procrustes_642", |b| {
        b.iter(|| procrustes_rotation(black_box(corpus[0].vertices()), corpus[1].vertices(), &opts).unwrap())
    });
}

fn simplification(c: &mut Criterion) {
    let mesh = &desk_corpus(1)[0];
    let mut group = c.benchmark_group("qem_simplify");
    group.sample_size(20);
    group.bench_function("642_to_160", |b| b.iter(|| qem_simplify(black_box(mesh), 160).unwrap()));
    group.bench_function("hierarchy_4_levels", |b| {
        b.iter(|| build_hierarchy(black_box(mesh), 4, 4.0).unwrap())
    });
    group.finish();
}

criterion_group!(benches, chebyshev, chamfer, procrustes, simplification);
criterion_main!(benches);
