use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use frboost_core::evalbench;
use frboost_core::latent_encoder::fid_from_features;
use frboost_core::nn::{conv2d, Conv2d};
use frboost_core::tensor::{grad, no_grad, Tensor};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = ArrayD::from_shape_simple_fn(IxDyn(&[16, 32, 32, 16]), || rng.random_range(-1.0..1.0));
    let layer = Conv2d::new(&mut rng, 16, 32, 3, 1, false);
    let x = Tensor::constant(x);
    c.bench_function("conv3x3 16x32x32x16 -> 32 forward", |b| {
        let _g = no_grad();
        b.iter(|| conv2d(&x, &layer.weight, 3, 1, 1))
    });
    c.bench_function("conv3x3 16x32x32x16 -> 32 forward+backward", |b| {
        b.iter_batched(
            || Tensor::leaf(x.to_array()),
            |input| {
                let y = conv2d(&input, &layer.weight, 3, 1, 1).square().sum_all();
                grad(&y, &[&input, &layer.weight], false)
            },
            BatchSize::SmallInput,
        )
    });
}

fn roc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pos: Vec<f64> = (0..1_000).map(|_| rng.random_range(0.0..1.0)).collect();
    let neg: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..0.5)).collect();
    c.bench_function("exact roc 1k pos / 100k neg", |b| b.iter(|| evalbench::exact_roc(&pos, &neg).unwrap()));
    c.bench_function("roc sweep 1k pos / 100k neg, 500 steps", |b| b.iter(|| evalbench::roc_sweep(&pos, &neg, -1.0, 1.0, 500).unwrap()));
    c.bench_function("tpr@fpr 1e-3", |b| b.iter(|| evalbench::tpr_at_fpr(&pos, &neg, 1e-3).unwrap()));
}

fn fid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Array2::from_shape_simple_fn((2_000, 112), || rng.random_range(-1.0..1.0));
    let b = Array2::from_shape_simple_fn((2_000, 112), || rng.random_range(-1.0..1.0) + 0.1);
    c.bench_function("frechet distance 2000 x 112", |bch| bch.iter(|| fid_from_features(&a, &b).unwrap()));
}

criterion_group!(benches, conv, roc, fid);
criterion_main!(benches);
