//! Dense-to-MoH conversion: the leading heads of a trained layer become
//! shared heads, routed heads are ranked by the ℓ2 norm of each head's
//! query, and the resulting scores are quantized to 0/1 through a
//! straight-through estimator so the converted layer reproduces the dense
//! output exactly at full activation.

use crate::attention::MHAWeights;
use crate::error::{MohError, Result};
use crate::moh::{MoHAttention, MoHConfig, Router, RouterMode, RoutingDecision};
use crate::tensor::{raw, Tape, Tensor};

/// How to carve a dense layer into shared and routed heads.
#[derive(Clone, Copy, Debug)]
pub struct RetrofitPlan {
    /// The first `shared_heads` heads of the source layer stay always on.
    pub shared_heads: usize,
    /// Routed heads activated per token by query-norm ranking.
    pub top_k: usize,
}

/// Routing by query norm: shared heads always activated, routed heads
/// ranked per token by the ℓ2 norm of that head's query vector. Gates come
/// out of the straight-through quantizer, so they are exactly 0 or 1 in
/// the forward pass while gradients reach the real-valued norms unchanged.
///
/// The norm is taken on the raw query projection X·W_Qⁱ; the 1/√d_k
/// attention scaling is a positive constant and cannot change the ranking.
pub fn parameter_free_route(
    tape: &Tape,
    q_heads: &[Tensor],
    plan: &RetrofitPlan,
) -> Result<RoutingDecision> {
    let h = q_heads.len();
    if h == 0 {
        return Err(MohError::Contract("parameter_free_route with zero heads".into()));
    }
    if plan.shared_heads >= h && !(plan.shared_heads == h && plan.top_k == 0) {
        return Err(MohError::Config(format!(
            "shared_heads ({}) must be < heads ({})",
            plan.shared_heads, h
        )));
    }
    let routed = h - plan.shared_heads;
    if plan.top_k > routed {
        return Err(MohError::Config(format!(
            "top_k ({}) exceeds routed heads ({})",
            plan.top_k, routed
        )));
    }
    let tokens = q_heads[0].shape()[0];

    let norms: Vec<Tensor> = q_heads
        .iter()
        .map(|q| tape.row_norm(q))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = norms.iter().collect();
    let scores = tape.concat_cols(&refs)?;

    let score_data = scores.data();
    let mut selections = Vec::with_capacity(tokens);
    for t in 0..tokens {
        let routed_scores: Vec<f64> = (0..routed)
            .map(|i| score_data[t * h + plan.shared_heads + i])
            .collect();
        selections.push(raw::top_k_indices(&routed_scores, plan.top_k));
    }

    let mut mask = vec![0.0; tokens * h];
    for (t, sel) in selections.iter().enumerate() {
        for i in 0..plan.shared_heads {
            mask[t * h + i] = 1.0;
        }
        for &i in sel {
            mask[t * h + plan.shared_heads + i] = 1.0;
        }
    }
    let gates = ste_quantize(tape, &scores, &mask)?;

    let activated = selections
        .iter()
        .map(|sel| {
            let mut idx: Vec<usize> = (0..plan.shared_heads).collect();
            idx.extend(sel.iter().map(|&i| plan.shared_heads + i));
            idx
        })
        .collect();

    Ok(RoutingDecision {
        gates,
        activated,
        alpha: None,
        routed_probs: None,
        routed_selections: selections,
    })
}

/// Quantize real-valued routing scores to the 0/1 selection indicator.
/// Forward emits exactly the mask; backward hands the incoming gradient to
/// the scores unchanged.
pub fn ste_quantize(tape: &Tape, scores: &Tensor, selection_mask: &[f64]) -> Result<Tensor> {
    tape.ste_mask(scores, selection_mask)
}

/// Convert trained dense attention weights into a parameter-free MoH
/// layer. The weights are reused unchanged; only the routing machinery is
/// added. At K = h - h_s every quantized gate is 1 and the converted layer
/// reproduces the dense output.
pub fn convert_dense_to_moh(w: &MHAWeights, plan: &RetrofitPlan) -> Result<MoHAttention> {
    if plan.shared_heads >= w.heads {
        return Err(MohError::Config(format!(
            "shared_heads ({}) must be < heads ({})",
            plan.shared_heads, w.heads
        )));
    }
    let cfg = MoHConfig {
        heads: w.heads,
        shared_heads: plan.shared_heads,
        top_k: plan.top_k,
        d_in: w.d_in,
        d_k: w.d_k,
        d_v: w.d_v,
        d_out: w.d_out,
        beta: 0.01,
        router_mode: RouterMode::ParameterFree,
    };
    cfg.validate()?;
    Ok(MoHAttention {
        cfg,
        weights: w.clone(),
        router: Router::ParameterFree,
    })
}
