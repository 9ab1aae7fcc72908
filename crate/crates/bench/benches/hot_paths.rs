//! Criterion benchmarks for the hot paths: corruption simulation, the
//! attention primitives, quality metrics, and one optimizer step of each
//! training stage.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use bitmend_core::cfc::ScaBlock;
use bitmend_core::dac::TdcaBlock;
use bitmend_core::metrics::ssim;
use bitmend_core::nn::{ParamBuilder, ParamStore};
use bitmend_core::pipeline::{simulate_dataset, train_dac, RunConfig};
use bitmend_core::rng;
use bitmend_core::tensor::Tape;
use bitmend_core::videodata::{simulate_corruption, synthesize_clean_clip, CorruptionSpec};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::Rng;

fn bench_simulate(c: &mut Criterion) {
    let clean = synthesize_clean_clip(1, 5, 64, 64);
    let spec = CorruptionSpec::default();
    c.bench_function("simulate_corruption_5x64x64", |b| {
        b.iter(|| simulate_corruption(black_box(&clean), black_box(&spec)).unwrap())
    });
}

fn bench_tdca(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(0, "init");
    let mut pb = ParamBuilder::new(&mut store, "b", &mut r);
    let block = TdcaBlock::new(&mut pb, "tdca", 64);
    let mut rr = rng::stream(1, "x");
    let feats = Array2::from_shape_fn((256, 64), |_| rr.random_range(-1.0..1.0));
    let pool = Array2::from_shape_fn((25, 64), |_| rr.random_range(-1.0..1.0));
    c.bench_function("tdca_forward_256x25_d64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let f = tape.leaf(feats.clone().into_dyn());
            let p = tape.leaf(pool.clone().into_dyn());
            let out = block.forward(&mut tape, &store, f, p);
            black_box(tape.value(out).sum())
        })
    });
}

fn bench_sca(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(2, "init");
    let mut pb = ParamBuilder::new(&mut store, "b", &mut r);
    let sca = ScaBlock::new(&mut pb, "sca", 16, 16, 8);
    let mut rr = rng::stream(3, "x");
    let fc = Array3::from_shape_fn((16, 16, 16), |_| rr.random_range(-1.0..1.0));
    let ff = Array3::from_shape_fn((16, 16, 16), |_| rr.random_range(-1.0..1.0));
    let mask = Array2::from_shape_fn((16, 16), |_| if rr.random_range(0..4) == 0 { 1.0 } else { 0.0 });
    c.bench_function("sca_forward_16x16_c16", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let a = tape.leaf(fc.clone().into_dyn());
            let f = tape.leaf(ff.clone().into_dyn());
            let d = tape.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0));
            let out = sca.forward(&mut tape, &store, a, f, &mask, d);
            black_box(tape.value(out).sum())
        })
    });
}

fn bench_ssim(c: &mut Criterion) {
    let mut rr = rng::stream(4, "x");
    let a = Array3::from_shape_fn((64, 64, 3), |_| rr.random_range(0.0..1.0));
    let b2 = Array3::from_shape_fn((64, 64, 3), |_| rr.random_range(0.0..1.0));
    c.bench_function("ssim_64x64", |b| {
        b.iter(|| black_box(ssim(black_box(&a), black_box(&b2)).unwrap()))
    });
}

fn bench_train_step(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::desk();
    config.data.clips = 2;
    config.data.frames_per_clip = 6;
    config.train_dac.steps = 1;
    config.train_dac.batch_clips = 1;
    let dataset = simulate_dataset(&config, 0, &dir.path().join("d")).unwrap();
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("dac_step_desk_batch1", |b| {
        b.iter(|| {
            train_dac(&config, &dataset, 0, &dir.path().join("r"), None).unwrap()
        })
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_simulate,
    bench_tdca,
    bench_sca,
    bench_ssim,
    bench_train_step
);
criterion_main!(benches);
