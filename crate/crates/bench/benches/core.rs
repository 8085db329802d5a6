//! Throughput benchmarks for the training-critical paths: raw matmul, one
//! optimizer step at desk scale, dataset generation, and gallery ranking.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use pm3e_bench::desk_scale_fixture;
use pm3e_core::data::EmbeddingRecord;
use pm3e_core::graph::Graph;
use pm3e_core::model::{EpsSource, VisibleSet};
use pm3e_core::retrieval::rank_gallery;
use pm3e_core::streams::stream_rng;
use pm3e_core::trainer::{build_loss_graph, train_step, AdamW};
use rand::Rng;
use rand_distr::StandardNormal;

fn bench_matmul(c: &mut Criterion) {
    let mut rng = stream_rng(1, "bench-matmul");
    let a: Vec<f64> = (0..1024 * 64).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..64 * 64).map(|_| rng.sample(StandardNormal)).collect();
    c.bench_function("matmul_1024x64x64", |bencher| {
        bencher.iter(|| {
            let mut g = Graph::new();
            let ta = g.leaf(1024, 64, a.clone()).unwrap();
            let tb = g.leaf(64, 64, b.clone()).unwrap();
            black_box(g.matmul(ta, tb).unwrap());
        })
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let (cfg, ds, params) = desk_scale_fixture();
    let batch: Vec<&EmbeddingRecord> = ds.records.iter().take(128).collect();
    let vs = VisibleSet::with_all_targets(vec![0, 2], 6).unwrap();
    c.bench_function("loss_graph_forward_backward_b128", |bencher| {
        bencher.iter(|| {
            let mut lg =
                build_loss_graph(&params, &batch, &vs, &cfg.loss, &mut EpsSource::Zero).unwrap();
            lg.graph.backward(lg.total).unwrap();
            black_box(lg.graph.scalar_value(lg.total).unwrap());
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let (cfg, ds, params) = desk_scale_fixture();
    let batch: Vec<EmbeddingRecord> = ds.records.iter().take(128).cloned().collect();
    let vs = VisibleSet::with_all_targets(vec![1], 6).unwrap();
    c.bench_function("train_step_b128", |bencher| {
        bencher.iter_batched(
            || {
                let p = params.clone();
                let opt = AdamW::new(&p, &cfg.train);
                (p, opt, stream_rng(3, "bench-eps"))
            },
            |(mut p, mut opt, mut eps)| {
                let refs: Vec<&EmbeddingRecord> = batch.iter().collect();
                black_box(
                    train_step(&mut p, &mut opt, &refs, &vs, &cfg.loss, &cfg.train, 1e-4, &mut eps)
                        .unwrap(),
                );
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_generate(c: &mut Criterion) {
    let (cfg, _, _) = desk_scale_fixture();
    c.bench_function("generate_512_records", |bencher| {
        bencher.iter(|| black_box(pm3e_core::data::generate(&cfg.synth, 5).unwrap()))
    });
}

fn bench_rank_gallery(c: &mut Criterion) {
    let mut rng = stream_rng(9, "bench-rank");
    let gallery: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..32).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let q: Vec<f64> = (0..32).map(|_| rng.sample(StandardNormal)).collect();
    c.bench_function("rank_gallery_200x32", |bencher| {
        bencher.iter(|| black_box(rank_gallery(&q, &gallery).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_forward_backward,
    bench_train_step,
    bench_generate,
    bench_rank_gallery
);
criterion_main!(benches);
