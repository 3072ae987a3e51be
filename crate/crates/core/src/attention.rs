//! Reference multi-head attention in concatenation form and summation
//! form. The two are algebraically identical once the output projection is
//! split into per-head row blocks; that identity is what makes per-head
//! gating well defined.

use rand::Rng;

use crate::error::{MohError, Result};
use crate::tensor::{raw, Tape, Tensor};

/// Per-head projection weights plus the output projection, stored both
/// fused and as per-head row blocks.
#[derive(Clone)]
pub struct MHAWeights {
    pub heads: usize,
    pub d_in: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_out: usize,
    /// `heads` matrices of shape `[d_in × d_k/heads]`.
    pub w_q: Vec<Tensor>,
    /// `heads` matrices of shape `[d_in × d_k/heads]`.
    pub w_k: Vec<Tensor>,
    /// `heads` matrices of shape `[d_in × d_v/heads]`.
    pub w_v: Vec<Tensor>,
    /// Row blocks of the output projection, `[d_v/heads × d_out]` each;
    /// stacking them vertically reconstructs the fused `[d_v × d_out]` W_O.
    pub w_o_rows: Vec<Tensor>,
}

impl MHAWeights {
    pub fn new(heads: usize, d_in: usize, d_k: usize, d_v: usize, d_out: usize) -> Result<Self> {
        if heads == 0 {
            return Err(MohError::Config("heads must be >= 1".into()));
        }
        if !d_k.is_multiple_of(heads) || !d_v.is_multiple_of(heads) {
            return Err(MohError::Config(format!(
                "d_k ({d_k}) and d_v ({d_v}) must be divisible by heads ({heads})"
            )));
        }
        let (hk, hv) = (d_k / heads, d_v / heads);
        Ok(MHAWeights {
            heads,
            d_in,
            d_k,
            d_v,
            d_out,
            w_q: (0..heads).map(|_| Tensor::zeros(&[d_in, hk])).collect(),
            w_k: (0..heads).map(|_| Tensor::zeros(&[d_in, hk])).collect(),
            w_v: (0..heads).map(|_| Tensor::zeros(&[d_in, hv])).collect(),
            w_o_rows: (0..heads).map(|_| Tensor::zeros(&[hv, d_out])).collect(),
        })
    }

    pub fn random<R: Rng>(
        heads: usize,
        d_in: usize,
        d_k: usize,
        d_v: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut w = Self::new(heads, d_in, d_k, d_v, d_out)?;
        let (hk, hv) = (d_k / heads, d_v / heads);
        let sq = 1.0 / (d_in as f64).sqrt();
        let so = 1.0 / (hv as f64).sqrt();
        for i in 0..heads {
            w.w_q[i] = Tensor::randn(&[d_in, hk], sq, rng);
            w.w_k[i] = Tensor::randn(&[d_in, hk], sq, rng);
            w.w_v[i] = Tensor::randn(&[d_in, hv], sq, rng);
            w.w_o_rows[i] = Tensor::randn(&[hv, d_out], so, rng);
        }
        Ok(w)
    }

    /// Mark every weight as trainable.
    pub fn trainable(mut self) -> Self {
        let grads = |ts: Vec<Tensor>| ts.into_iter().map(Tensor::with_grad).collect();
        self.w_q = grads(self.w_q);
        self.w_k = grads(self.w_k);
        self.w_v = grads(self.w_v);
        self.w_o_rows = grads(self.w_o_rows);
        self
    }

    /// The fused output projection `[d_v × d_out]`, reconstructed from its
    /// row blocks.
    pub fn w_o_fused(&self) -> Tensor {
        let hv = self.d_v / self.heads;
        let mut data = Vec::with_capacity(self.d_v * self.d_out);
        for block in &self.w_o_rows {
            debug_assert_eq!(block.shape(), vec![hv, self.d_out]);
            data.extend(block.data());
        }
        Tensor::from_vec(&[self.d_v, self.d_out], data).expect("w_o_fused")
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for i in 0..self.heads {
            out.push((format!("attn/w_q_{i}"), self.w_q[i].clone()));
            out.push((format!("attn/w_k_{i}"), self.w_k[i].clone()));
            out.push((format!("attn/w_v_{i}"), self.w_v[i].clone()));
            out.push((format!("attn/w_o_{i}"), self.w_o_rows[i].clone()));
        }
        out
    }
}

/// Softmax(QKᵀ/√d)·V.
pub fn scaled_dot_product_attention(
    tape: &Tape,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    let qs = q.shape();
    let ks = k.shape();
    let vs = v.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(MohError::ShapeMismatch {
            op: "scaled_dot_product_attention (Q·Kᵀ)",
            lhs: qs,
            rhs: ks,
        });
    }
    if vs.len() != 2 || ks[0] != vs[0] {
        return Err(MohError::ShapeMismatch {
            op: "scaled_dot_product_attention (K rows vs V rows)",
            lhs: ks,
            rhs: vs,
        });
    }
    let d = qs[1];
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(&scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_lastdim(&scaled);
    tape.matmul(&weights, v)
}

fn head_output(
    tape: &Tape,
    x: &Tensor,
    x_ctx: &Tensor,
    w: &MHAWeights,
    i: usize,
) -> Result<Tensor> {
    let q = tape.matmul(x, &w.w_q[i])?;
    let k = tape.matmul(x_ctx, &w.w_k[i])?;
    let v = tape.matmul(x_ctx, &w.w_v[i])?;
    scaled_dot_product_attention(tape, &q, &k, &v)
}

/// Concatenation-form attention: heads concatenated, then one fused output
/// projection.
pub fn multi_head_concat(
    tape: &Tape,
    x: &Tensor,
    x_ctx: &Tensor,
    w: &MHAWeights,
) -> Result<Tensor> {
    let heads: Vec<Tensor> = (0..w.heads)
        .map(|i| head_output(tape, x, x_ctx, w, i))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = heads.iter().collect();
    let concat = tape.concat_cols(&refs)?;
    tape.matmul(&concat, &w.w_o_fused())
}

/// Summation-form attention: Σᵢ Hⁱ·W_Oⁱ over the per-head row blocks.
pub fn multi_head_sum(tape: &Tape, x: &Tensor, x_ctx: &Tensor, w: &MHAWeights) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for i in 0..w.heads {
        let h = head_output(tape, x, x_ctx, w, i)?;
        let proj = tape.matmul(&h, &w.w_o_rows[i])?;
        acc = Some(match acc {
            None => proj,
            Some(prev) => tape.add(&prev, &proj)?,
        });
    }
    acc.ok_or_else(|| MohError::Config("multi_head_sum over zero heads".into()))
}

/// Forward-only per-head attention weight matrices Softmax(QKᵀ/√d), one
/// `[T×T']` row-stochastic matrix per head. Used by the redundancy
/// analysis; records nothing on any tape.
pub fn attention_patterns(x: &Tensor, x_ctx: &Tensor, w: &MHAWeights) -> Result<Vec<Vec<f64>>> {
    let t = x.shape()[0];
    let t_ctx = x_ctx.shape()[0];
    let hk = w.d_k / w.heads;
    let (xd, cd) = (x.data(), x_ctx.data());
    let mut out = Vec::with_capacity(w.heads);
    for i in 0..w.heads {
        let mut q = vec![0.0; t * hk];
        raw::matmul(&xd, &w.w_q[i].data(), t, w.d_in, hk, &mut q);
        let mut k = vec![0.0; t_ctx * hk];
        raw::matmul(&cd, &w.w_k[i].data(), t_ctx, w.d_in, hk, &mut k);
        let mut scores = vec![0.0; t * t_ctx];
        raw::matmul_nt(&q, &k, t, hk, t_ctx, &mut scores);
        let inv = 1.0 / (hk as f64).sqrt();
        for s in scores.iter_mut() {
            *s *= inv;
        }
        raw::softmax_rows(&mut scores, t_ctx);
        out.push(scores);
    }
    Ok(out)
}

/// Forward-only per-head outputs Hⁱ `[T × d_v/h]`, before the output
/// projection. Used by the output-feature cosine analysis.
pub fn head_features(x: &Tensor, x_ctx: &Tensor, w: &MHAWeights) -> Result<Vec<Vec<f64>>> {
    let t = x.shape()[0];
    let t_ctx = x_ctx.shape()[0];
    let hv = w.d_v / w.heads;
    let cd = x_ctx.data();
    let patterns = attention_patterns(x, x_ctx, w)?;
    let mut out = Vec::with_capacity(w.heads);
    for (i, pattern) in patterns.iter().enumerate() {
        let mut v = vec![0.0; t_ctx * hv];
        raw::matmul(&cd, &w.w_v[i].data(), t_ctx, w.d_in, hv, &mut v);
        let mut h = vec![0.0; t * hv];
        raw::matmul(pattern, &v, t, t_ctx, hv, &mut h);
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_token_attention_returns_v() {
        let mut rng = crate::test_rng(1);
        let tape = Tape::new();
        let q = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let out = scaled_dot_product_attention(&tape, &q, &k, &v).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn saturated_softmax_selects_matching_row() {
        let tape = Tape::new();
        // Orthogonal keys; query = 100 * K row 1.
        let k = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = Tensor::from_vec(&[1, 2], vec![0.0, 100.0]).unwrap();
        let v = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = scaled_dot_product_attention(&tape, &q, &k, &v).unwrap();
        assert!(max_abs_diff(&out.data(), &[3.0, 4.0]) < 1e-12);
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = crate::test_rng(2);
        let tape = Tape::new();
        let (t, t_ctx, d, dv) = (3, 4, 2, 3);
        let q = Tensor::randn(&[t, d], 1.0, &mut rng);
        let k = Tensor::randn(&[t_ctx, d], 1.0, &mut rng);
        let v = Tensor::randn(&[t_ctx, dv], 1.0, &mut rng);
        let out = scaled_dot_product_attention(&tape, &q, &k, &v).unwrap();

        // Direct evaluation of Softmax(QKᵀ/√d)·V, independent loops.
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut expect = vec![0.0; t * dv];
        for i in 0..t {
            let mut logits = vec![0.0; t_ctx];
            for j in 0..t_ctx {
                for p in 0..d {
                    logits[j] += qd[i * d + p] * kd[j * d + p];
                }
                logits[j] /= (d as f64).sqrt();
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..t_ctx {
                for c in 0..dv {
                    expect[i * dv + c] += exps[j] / z * vd[j * dv + c];
                }
            }
        }
        assert!(max_abs_diff(&out.data(), &expect) < 1e-10);
    }

    #[test]
    fn single_head_concat_reduces_to_attention_plus_projection() {
        let mut rng = crate::test_rng(3);
        let tape = Tape::new();
        let w = MHAWeights::random(1, 4, 4, 4, 5, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let got = multi_head_concat(&tape, &x, &x, &w).unwrap();

        let q = tape.matmul(&x, &w.w_q[0]).unwrap();
        let k = tape.matmul(&x, &w.w_k[0]).unwrap();
        let v = tape.matmul(&x, &w.w_v[0]).unwrap();
        let h = scaled_dot_product_attention(&tape, &q, &k, &v).unwrap();
        let expect = tape.matmul(&h, &w.w_o_fused()).unwrap();
        assert!(max_abs_diff(&got.data(), &expect.data()) < 1e-12);
    }

    #[test]
    fn concat_matches_per_head_oracle() {
        let mut rng = crate::test_rng(4);
        let tape = Tape::new();
        let w = MHAWeights::random(2, 4, 4, 4, 3, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);
        let got = multi_head_concat(&tape, &x, &x, &w).unwrap();

        // Hand-rolled: each head separately, concat, fused projection.
        let mut concat = vec![0.0; 2 * 4];
        for i in 0..2 {
            let q = tape.matmul(&x, &w.w_q[i]).unwrap();
            let k = tape.matmul(&x, &w.w_k[i]).unwrap();
            let v = tape.matmul(&x, &w.w_v[i]).unwrap();
            let h = scaled_dot_product_attention(&tape, &q, &k, &v).unwrap().data();
            for r in 0..2 {
                for c in 0..2 {
                    concat[r * 4 + i * 2 + c] = h[r * 2 + c];
                }
            }
        }
        let concat = Tensor::from_vec(&[2, 4], concat).unwrap();
        let expect = tape.matmul(&concat, &w.w_o_fused()).unwrap();
        assert!(max_abs_diff(&got.data(), &expect.data()) < 1e-10);
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let mut rng = crate::test_rng(5);
        let tape = Tape::new();
        let mut w = MHAWeights::random(2, 4, 4, 4, 3, &mut rng).unwrap();
        for i in 0..2 {
            w.w_v[i] = Tensor::zeros(&[4, 2]);
        }
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = multi_head_concat(&tape, &x, &x, &w).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_output_row_block_removes_that_head() {
        let mut rng = crate::test_rng(6);
        let tape = Tape::new();
        let w = MHAWeights::random(3, 4, 6, 6, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4], 1.0, &mut rng);

        let mut masked = w.clone();
        masked.w_o_rows[1] = Tensor::zeros(&[2, 4]);
        let got = multi_head_sum(&tape, &x, &x, &masked).unwrap();

        // Sum over the remaining heads only.
        let h0 = tape
            .matmul(
                &scaled_dot_product_attention(
                    &tape,
                    &tape.matmul(&x, &w.w_q[0]).unwrap(),
                    &tape.matmul(&x, &w.w_k[0]).unwrap(),
                    &tape.matmul(&x, &w.w_v[0]).unwrap(),
                )
                .unwrap(),
                &w.w_o_rows[0],
            )
            .unwrap();
        let h2 = tape
            .matmul(
                &scaled_dot_product_attention(
                    &tape,
                    &tape.matmul(&x, &w.w_q[2]).unwrap(),
                    &tape.matmul(&x, &w.w_k[2]).unwrap(),
                    &tape.matmul(&x, &w.w_v[2]).unwrap(),
                )
                .unwrap(),
                &w.w_o_rows[2],
            )
            .unwrap();
        let expect = tape.add(&h0, &h2).unwrap();
        assert!(max_abs_diff(&got.data(), &expect.data()) < 1e-12);
    }

    #[test]
    fn head_permutation_leaves_sum_form_unchanged() {
        let mut rng = crate::test_rng(7);
        let tape = Tape::new();
        let w = MHAWeights::random(4, 4, 8, 8, 4, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let base = multi_head_sum(&tape, &x, &x, &w).unwrap();

        let mut permuted = w.clone();
        let perm = [2usize, 0, 3, 1];
        permuted.w_q = perm.iter().map(|&i| w.w_q[i].clone()).collect();
        permuted.w_k = perm.iter().map(|&i| w.w_k[i].clone()).collect();
        permuted.w_v = perm.iter().map(|&i| w.w_v[i].clone()).collect();
        permuted.w_o_rows = perm.iter().map(|&i| w.w_o_rows[i].clone()).collect();
        let got = multi_head_sum(&tape, &x, &x, &permuted).unwrap();
        assert!(max_abs_diff(&base.data(), &got.data()) < 1e-10);
    }

    #[test]
    fn both_forms_share_gradients() {
        let mut rng = crate::test_rng(8);
        let w = MHAWeights::random(2, 3, 4, 4, 3, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);

        // d(sum of outputs)/d(w_q[0]) via each form.
        let grad_of = |concat_form: bool| {
            let tape = Tape::new();
            let mut wt = w.clone();
            wt.w_q[0] = wt.w_q[0].detach().with_grad();
            let out = if concat_form {
                multi_head_concat(&tape, &x, &x, &wt).unwrap()
            } else {
                multi_head_sum(&tape, &x, &x, &wt).unwrap()
            };
            let sq = tape.mul(&out, &out).unwrap();
            let loss = tape.sum_all(&sq);
            tape.backward(&loss).unwrap();
            wt.w_q[0].grad().unwrap()
        };
        let (gc, gs) = (grad_of(true), grad_of(false));
        assert!(max_abs_diff(&gc, &gs) < 1e-8);
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = crate::test_rng(9);
        let w = MHAWeights::random(2, 4, 4, 4, 3, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let x_ctx = Tensor::randn(&[5, 4], 1.0, &mut rng);
        for pattern in attention_patterns(&x, &x_ctx, &w).unwrap() {
            for row in pattern.chunks(5) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn attention_gradients_pass_finite_differences() {
        let mut rng = crate::test_rng(10);
        let w = MHAWeights::random(2, 3, 4, 4, 2, &mut rng).unwrap();
        let x0 = Tensor::randn(&[2, 3], 0.5, &mut rng);
        let err = finite_diff_check(
            |tape, x| {
                let out = multi_head_sum(tape, x, x, &w)?;
                let sq = tape.mul(&out, &out)?;
                Ok(tape.sum_all(&sq))
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn concat_equals_sum_form(
            h_pow in 0u32..=3,
            t in 1usize..=6,
            t_ctx in 1usize..=6,
            seed in 0u64..10_000
        ) {
            let h = 1usize << h_pow;
            let mut rng = crate::test_rng(seed);
            let tape = Tape::new();
            let w = MHAWeights::random(h, 5, 2 * h, 2 * h, 4, &mut rng).unwrap();
            let x = Tensor::randn(&[t, 5], 1.0, &mut rng);
            let x_ctx = Tensor::randn(&[t_ctx, 5], 1.0, &mut rng);
            let a = multi_head_concat(&tape, &x, &x_ctx, &w).unwrap();
            let b = multi_head_sum(&tape, &x, &x_ctx, &w).unwrap();
            prop_assert!(max_abs_diff(&a.data(), &b.data()) < 1e-9);
        }
    }
}
