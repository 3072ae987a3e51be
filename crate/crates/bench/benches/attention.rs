//! Dense vs head-masked sparse forward passes through the same kernel,
//! across activation ratios.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moh_core::sparse::{sparse_attention_forward, HeadMask};
use moh_core::{MHAWeights, Tape, Tensor};

fn setup(
    heads: usize,
    head_dim: usize,
    seq: usize,
) -> (MHAWeights, Tensor) {
    let d_in = 2 * head_dim;
    let d_model = heads * head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let w = MHAWeights::random(heads, d_in, d_model, d_model, d_in, &mut rng).unwrap();
    let x = Tensor::randn(&[seq, d_in], 1.0, &mut rng);
    (w, x)
}

fn mask_with_ratio(seq: usize, heads: usize, ratio: f64) -> (HeadMask, Tensor) {
    let active = ((ratio * heads as f64).round() as usize).clamp(1, heads);
    let mut bits = vec![false; seq * heads];
    for t in 0..seq {
        // Rotate the active window so load spreads across heads.
        for a in 0..active {
            bits[t * heads + (t + a) % heads] = true;
        }
    }
    let gates: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    (
        HeadMask::from_bits(seq, heads, bits).unwrap(),
        Tensor::from_vec(&[seq, heads], gates).unwrap(),
    )
}

fn bench_sparse_ratios(c: &mut Criterion) {
    let (heads, head_dim, seq) = (8, 16, 64);
    let (w, x) = setup(heads, head_dim, seq);
    let mut group = c.benchmark_group("sparse_forward");
    for ratio in [1.0, 0.75, 0.5, 0.25] {
        let (mask, gates) = mask_with_ratio(seq, heads, ratio);
        group.bench_with_input(BenchmarkId::from_parameter(ratio), &ratio, |b, _| {
            b.iter(|| sparse_attention_forward(&x, &x, &w, &mask, &gates).unwrap())
        });
    }
    group.finish();
}

fn bench_dense_forms(c: &mut Criterion) {
    let (w, x) = setup(4, 8, 32);
    c.bench_function("multi_head_sum", |b| {
        b.iter(|| {
            let tape = Tape::new();
            moh_core::multi_head_sum(&tape, &x, &x, &w).unwrap()
        })
    });
    c.bench_function("multi_head_concat", |b| {
        b.iter(|| {
            let tape = Tape::new();
            moh_core::multi_head_concat(&tape, &x, &x, &w).unwrap()
        })
    });
}

criterion_group!(benches, bench_sparse_ratios, bench_dense_forms);
criterion_main!(benches);
