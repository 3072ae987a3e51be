//! Head-masked sparse inference: per-head gather/scatter execution that
//! skips inactive (head, token) work items, an exact multiply-add counter,
//! and a wall-clock benchmark where the dense baseline runs through the
//! same kernel at 100% activation so kernel quality cancels out.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::MHAWeights;
use crate::error::{MohError, Result};
use crate::moh::RoutingDecision;
use crate::tensor::{raw, Tensor};

/// Which heads each token activates, in both token-major (bitset) and
/// head-major (token list) layouts.
#[derive(Clone, Debug)]
pub struct HeadMask {
    pub tokens: usize,
    pub heads: usize,
    /// Row-major `[tokens × heads]` activation bits.
    pub bits: Vec<bool>,
    /// For each head, the sorted list of tokens that activate it.
    pub head_tokens: Vec<Vec<usize>>,
}

impl HeadMask {
    pub fn from_bits(tokens: usize, heads: usize, bits: Vec<bool>) -> Result<HeadMask> {
        if bits.len() != tokens * heads {
            return Err(MohError::Contract(format!(
                "mask length {} != tokens*heads {}",
                bits.len(),
                tokens * heads
            )));
        }
        let mut head_tokens = vec![Vec::new(); heads];
        for t in 0..tokens {
            for (i, ht) in head_tokens.iter_mut().enumerate() {
                if bits[t * heads + i] {
                    ht.push(t);
                }
            }
        }
        Ok(HeadMask {
            tokens,
            heads,
            bits,
            head_tokens,
        })
    }

    pub fn full(tokens: usize, heads: usize) -> HeadMask {
        HeadMask::from_bits(tokens, heads, vec![true; tokens * heads]).expect("full mask")
    }

    pub fn active_per_token(&self, t: usize) -> usize {
        (0..self.heads).filter(|&i| self.bits[t * self.heads + i]).count()
    }
}

/// Materialize the router's decision as a head mask: a bit is set exactly
/// where the gate is nonzero.
pub fn build_head_mask(decision: &RoutingDecision) -> HeadMask {
    let (tokens, heads) = (decision.tokens(), decision.heads());
    let gates = decision.gates.data();
    let bits = gates.iter().map(|&g| g != 0.0).collect();
    HeadMask::from_bits(tokens, heads, bits).expect("decision shapes are consistent")
}

/// Sparse MoH forward: for each head, gather the query rows of the tokens
/// that activate it, run attention over the full context, project, scale
/// by the gate and scatter back. Numerically identical to the dense gated
/// path; keys and values still cover every context token because each
/// active query row attends to the whole context.
pub fn sparse_attention_forward(
    x: &Tensor,
    x_ctx: &Tensor,
    w: &MHAWeights,
    mask: &HeadMask,
    gates: &Tensor,
) -> Result<Tensor> {
    let tokens = x.shape()[0];
    let t_ctx = x_ctx.shape()[0];
    if mask.tokens != tokens || mask.heads != w.heads {
        return Err(MohError::Contract(format!(
            "mask {}x{} inconsistent with {} tokens / {} heads",
            mask.tokens, mask.heads, tokens, w.heads
        )));
    }
    let gate_data = gates.data();
    if gate_data.len() != tokens * w.heads {
        return Err(MohError::Contract(format!(
            "gates shape {:?} inconsistent with mask",
            gates.shape()
        )));
    }
    for (b, &g) in mask.bits.iter().zip(&gate_data) {
        if *b != (g != 0.0) {
            return Err(MohError::Contract(
                "mask bits disagree with gate nonzero pattern".into(),
            ));
        }
    }

    let (hk, hv) = (w.d_k / w.heads, w.d_v / w.heads);
    let (xd, cd) = (x.data(), x_ctx.data());
    let inv_sqrt = 1.0 / (hk as f64).sqrt();
    let mut out = vec![0.0; tokens * w.d_out];

    for i in 0..w.heads {
        let active = &mask.head_tokens[i];
        if active.is_empty() {
            continue;
        }
        let a = active.len();

        // Gather active query rows of the input.
        let mut x_gather = vec![0.0; a * w.d_in];
        for (r, &t) in active.iter().enumerate() {
            x_gather[r * w.d_in..(r + 1) * w.d_in]
                .copy_from_slice(&xd[t * w.d_in..(t + 1) * w.d_in]);
        }
        let mut q = vec![0.0; a * hk];
        raw::matmul(&x_gather, &w.w_q[i].data(), a, w.d_in, hk, &mut q);
        let mut k = vec![0.0; t_ctx * hk];
        raw::matmul(&cd, &w.w_k[i].data(), t_ctx, w.d_in, hk, &mut k);
        let mut v = vec![0.0; t_ctx * hv];
        raw::matmul(&cd, &w.w_v[i].data(), t_ctx, w.d_in, hv, &mut v);

        let mut scores = vec![0.0; a * t_ctx];
        raw::matmul_nt(&q, &k, a, hk, t_ctx, &mut scores);
        for s in scores.iter_mut() {
            *s *= inv_sqrt;
        }
        raw::softmax_rows(&mut scores, t_ctx);

        let mut h = vec![0.0; a * hv];
        raw::matmul(&scores, &v, a, t_ctx, hv, &mut h);
        let mut proj = vec![0.0; a * w.d_out];
        raw::matmul(&h, &w.w_o_rows[i].data(), a, hv, w.d_out, &mut proj);

        // Scatter gated contributions back to their token rows.
        for (r, &t) in active.iter().enumerate() {
            let g = gate_data[t * w.heads + i];
            let orow = &mut out[t * w.d_out..(t + 1) * w.d_out];
            for (o, &p) in orow.iter_mut().zip(&proj[r * w.d_out..(r + 1) * w.d_out]) {
                *o += g * p;
            }
        }
    }
    Tensor::from_vec(&[tokens, w.d_out], out)
}

/// Exact multiply-add count of `sparse_attention_forward` for a given
/// mask. Hardware independent; this is the primary efficiency signal.
pub fn count_flops(mask: &HeadMask, d_in: usize, head_dim: usize, t_ctx: usize, d_out: usize) -> u64 {
    let (hk, hv) = (head_dim, head_dim);
    let mut total = 0u64;
    for active in &mask.head_tokens {
        let a = active.len() as u64;
        if a == 0 {
            continue;
        }
        let (d_in, hk, hv, t_ctx, d_out) =
            (d_in as u64, hk as u64, hv as u64, t_ctx as u64, d_out as u64);
        total += a * d_in * hk; // gathered Q projection
        total += t_ctx * d_in * (hk + hv); // full K and V projections
        total += a * t_ctx * hk; // Q·Kᵀ
        total += a * t_ctx * hv; // attention · V
        total += a * hv * d_out; // output row-block projection
    }
    total
}

/// One row of the inference-time comparison.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub head_num: usize,
    pub head_dim: usize,
    pub seq_len: usize,
    pub ratio: f64,
    /// Median wall-clock of the 100%-activation run, milliseconds.
    pub dense_ms: f64,
    /// Median wall-clock at this activation ratio, milliseconds.
    pub sparse_ms: f64,
    pub speedup: f64,
    pub flops_dense: u64,
    pub flops_sparse: u64,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Random mask activating `active` heads per token.
fn random_mask(tokens: usize, heads: usize, active: usize, rng: &mut ChaCha8Rng) -> HeadMask {
    let mut bits = vec![false; tokens * heads];
    let all: Vec<usize> = (0..heads).collect();
    for t in 0..tokens {
        for &i in all.choose_multiple(rng, active) {
            bits[t * heads + i] = true;
        }
    }
    HeadMask::from_bits(tokens, heads, bits).expect("consistent by construction")
}

fn time_forward(
    x: &Tensor,
    w: &MHAWeights,
    mask: &HeadMask,
    gates: &Tensor,
    reps: usize,
) -> Result<f64> {
    const WARMUPS: usize = 3;
    for _ in 0..WARMUPS {
        sparse_attention_forward(x, x, w, mask, gates)?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = sparse_attention_forward(x, x, w, mask, gates)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        // Keep the optimizer from discarding the forward pass.
        std::hint::black_box(out.data()[0]);
    }
    Ok(median(&mut samples))
}

/// Time the head-masked kernel across activation ratios on identical
/// random inputs. The dense baseline is the same kernel at 100%
/// activation. Single-threaded; medians of `reps` runs after warm-up.
pub fn benchmark_inference(
    head_num: usize,
    head_dim: usize,
    seq_len: usize,
    ratios: &[f64],
    reps: usize,
) -> Result<Vec<BenchReport>> {
    if reps < 5 {
        return Err(MohError::Config(format!("reps must be >= 5, got {reps}")));
    }
    if ratios.is_empty() {
        return Err(MohError::Config("at least one activation ratio required".into()));
    }
    for &r in ratios {
        if !(0.0 < r && r <= 1.0) {
            return Err(MohError::Config(format!("ratio {r} outside (0, 1]")));
        }
    }
    let d_in = 2 * head_dim;
    let d_out = d_in;
    let d_model = head_num * head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(0x_B0B0);
    let w = MHAWeights::random(head_num, d_in, d_model, d_model, d_out, &mut rng)?;
    let x = Tensor::randn(&[seq_len, d_in], 1.0, &mut rng);

    let full = HeadMask::full(seq_len, head_num);
    let ones = Tensor::from_vec(&[seq_len, head_num], vec![1.0; seq_len * head_num])?;
    let dense_ms = time_forward(&x, &w, &full, &ones, reps)?;
    let flops_dense = count_flops(&full, d_in, head_dim, seq_len, d_out);

    let mut reports = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let active = ((ratio * head_num as f64).round() as usize).clamp(1, head_num);
        let mask = random_mask(seq_len, head_num, active, &mut rng);
        let mut gate_data = vec![0.0; seq_len * head_num];
        for (g, &b) in gate_data.iter_mut().zip(&mask.bits) {
            if b {
                *g = 1.0;
            }
        }
        let gates = Tensor::from_vec(&[seq_len, head_num], gate_data)?;
        let sparse_ms = time_forward(&x, &w, &mask, &gates, reps)?;
        reports.push(BenchReport {
            head_num,
            head_dim,
            seq_len,
            ratio,
            dense_ms,
            sparse_ms,
            speedup: dense_ms / sparse_ms,
            flops_dense,
            flops_sparse: count_flops(&mask, d_in, head_dim, seq_len, d_out),
        });
    }
    Ok(reports)
}

pub const BENCH_CSV_HEADER: &str =
    "head_num,head_dim,seq_len,ratio,dense_ms,sparse_ms,speedup,flops_dense,flops_sparse";

pub fn write_bench_csv<W: Write>(reports: &[BenchReport], mut out: W) -> Result<()> {
    writeln!(out, "{BENCH_CSV_HEADER}")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{:.6},{:.6},{:.4},{},{}",
            r.head_num,
            r.head_dim,
            r.seq_len,
            r.ratio,
            r.dense_ms,
            r.sparse_ms,
            r.speedup,
            r.flops_dense,
            r.flops_sparse
        )?;
    }
    Ok(())
}

pub fn format_bench_table(reports: &[BenchReport]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:>8} {:>8} {:>8} {:>7} {:>10} {:>10} {:>8} {:>14} {:>14}\n",
        "heads", "head_dim", "seq_len", "ratio", "dense_ms", "sparse_ms", "speedup",
        "flops_dense", "flops_sparse"
    ));
    for r in reports {
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>7.2} {:>10.3} {:>10.3} {:>8.2} {:>14} {:>14}\n",
            r.head_num,
            r.head_dim,
            r.seq_len,
            r.ratio,
            r.dense_ms,
            r.sparse_ms,
            r.speedup,
            r.flops_dense,
            r.flops_sparse
        ));
    }
    s
}
