//! Mixture-of-Head attention: two-stage Top-K routing with shared heads,
//! the gated weighted-sum forward pass, and the load-balance objective.

use rand::Rng;

use crate::attention::MHAWeights;
use crate::error::{MohError, Result};
use crate::tensor::{raw, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterMode {
    /// Learned two-stage router: per-group softmax scores scaled by a
    /// learned (α1, α2) split between shared and routed heads.
    LearnedTwoStage,
    /// Retrofit router: heads ranked by query ℓ2 norm, gates quantized to
    /// 0/1 with a straight-through estimator. No trainable router weights.
    ParameterFree,
}

/// All architectural hyper-parameters of one MoH layer.
#[derive(Clone, Copy, Debug)]
pub struct MoHConfig {
    pub heads: usize,
    pub shared_heads: usize,
    /// Number of routed heads activated per token.
    pub top_k: usize,
    pub d_in: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_out: usize,
    /// Load-balance loss weight.
    pub beta: f64,
    pub router_mode: RouterMode,
}

impl MoHConfig {
    pub fn routed_heads(&self) -> usize {
        self.heads - self.shared_heads
    }

    pub fn active_heads(&self) -> usize {
        self.shared_heads + self.top_k
    }

    pub fn activation_ratio(&self) -> f64 {
        self.active_heads() as f64 / self.heads as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(MohError::Config("heads must be >= 1".into()));
        }
        if self.shared_heads >= self.heads {
            return Err(MohError::Config(format!(
                "shared_heads ({}) must be < heads ({})",
                self.shared_heads, self.heads
            )));
        }
        if self.top_k > self.routed_heads() {
            return Err(MohError::Config(format!(
                "top_k ({}) exceeds routed heads ({})",
                self.top_k,
                self.routed_heads()
            )));
        }
        // Zero routed activations only make sense in retrofit mode, where
        // shared heads can carry the layer alone.
        if self.top_k == 0 && self.router_mode == RouterMode::LearnedTwoStage {
            return Err(MohError::Config("top_k must be >= 1 for the learned router".into()));
        }
        if self.beta < 0.0 {
            return Err(MohError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !self.d_k.is_multiple_of(self.heads) || !self.d_v.is_multiple_of(self.heads) {
            return Err(MohError::Config(format!(
                "d_k ({}) and d_v ({}) must be divisible by heads ({})",
                self.d_k, self.d_v, self.heads
            )));
        }
        Ok(())
    }
}

/// Learnable routing projections.
#[derive(Clone)]
pub struct RouterState {
    /// `[h_s × d_in]` shared-head scores.
    pub w_shared: Tensor,
    /// `[(h-h_s) × d_in]` routed-head scores.
    pub w_routed: Tensor,
    /// `[2 × d_in]` head-type split producing (α1, α2).
    pub w_head_type: Tensor,
}

impl RouterState {
    pub fn zeros(cfg: &MoHConfig) -> RouterState {
        RouterState {
            w_shared: Tensor::zeros(&[cfg.shared_heads, cfg.d_in]),
            w_routed: Tensor::zeros(&[cfg.routed_heads(), cfg.d_in]),
            w_head_type: Tensor::zeros(&[2, cfg.d_in]),
        }
    }

    pub fn random<R: Rng>(cfg: &MoHConfig, rng: &mut R) -> RouterState {
        let s = 1.0 / (cfg.d_in as f64).sqrt();
        RouterState {
            w_shared: Tensor::randn(&[cfg.shared_heads, cfg.d_in], s, rng),
            w_routed: Tensor::randn(&[cfg.routed_heads(), cfg.d_in], s, rng),
            w_head_type: Tensor::randn(&[2, cfg.d_in], s, rng),
        }
    }

    pub fn trainable(self) -> RouterState {
        RouterState {
            w_shared: self.w_shared.with_grad(),
            w_routed: self.w_routed.with_grad(),
            w_head_type: self.w_head_type.with_grad(),
        }
    }

    pub fn all_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("router/w_shared".into(), self.w_shared.clone()),
            ("router/w_routed".into(), self.w_routed.clone()),
            ("router/w_head_type".into(), self.w_head_type.clone()),
        ]
    }

    fn check_shapes(&self, cfg: &MoHConfig) -> Result<()> {
        let expect = [
            (self.w_shared.shape(), vec![cfg.shared_heads, cfg.d_in]),
            (self.w_routed.shape(), vec![cfg.routed_heads(), cfg.d_in]),
            (self.w_head_type.shape(), vec![2, cfg.d_in]),
        ];
        for (got, want) in expect {
            if got != want {
                return Err(MohError::Config(format!(
                    "router weight shape {:?} does not match config (expected {:?})",
                    got, want
                )));
            }
        }
        Ok(())
    }
}

/// Per-token routing outcome: the gate vector over all heads, the
/// activated index sets, and the intermediates the losses need.
#[derive(Clone)]
pub struct RoutingDecision {
    /// `[T × h]` multiplicative gates; exactly zero for inactive heads.
    pub gates: Tensor,
    /// Per-token sorted activated head indices, length `h_s + K`.
    pub activated: Vec<Vec<usize>>,
    /// `[T × 2]` (α1, α2) split; absent in parameter-free mode.
    pub alpha: Option<Tensor>,
    /// `[T × (h-h_s)]` full routed softmax (pre-masking), the P term of
    /// the load-balance loss; absent in parameter-free mode.
    pub routed_probs: Option<Tensor>,
    /// Per-token selected routed head indices in `0..h-h_s`.
    pub routed_selections: Vec<Vec<usize>>,
}

impl RoutingDecision {
    /// Test hook: every gate forced to exactly 1, collapsing the MoH
    /// forward pass onto the plain summation form.
    pub fn full_activation(tokens: usize, heads: usize) -> RoutingDecision {
        RoutingDecision {
            gates: Tensor::from_vec(&[tokens, heads], vec![1.0; tokens * heads])
                .expect("full_activation"),
            activated: vec![(0..heads).collect(); tokens],
            alpha: None,
            routed_probs: None,
            routed_selections: vec![(0..heads).collect(); tokens],
        }
    }

    pub fn tokens(&self) -> usize {
        self.gates.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.gates.shape()[1]
    }
}

/// Two-stage routing: α = Softmax(W_h·x) splits gate mass between head
/// types; shared gates are α1·Softmax(W_s·x), routed gates are
/// α2·Softmax(W_r·x) masked down to the per-token Top-K logits.
///
/// The routed softmax is taken over all routed heads and non-selected
/// entries are zeroed; there is no renormalization over the selected
/// subset.
pub fn route_two_stage(
    tape: &Tape,
    x: &Tensor,
    router: &RouterState,
    cfg: &MoHConfig,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    if cfg.router_mode != RouterMode::LearnedTwoStage {
        return Err(MohError::Config(
            "route_two_stage requires the learned-two-stage router mode".into(),
        ));
    }
    router.check_shapes(cfg)?;
    // Selection ranks the raw routed logits; ranking by the softmax of the
    // same logits would be identical (softmax is monotone per row).
    let routed_logits = tape.matmul_nt(x, &router.w_routed)?;
    let logits = routed_logits.data();
    let n = cfg.routed_heads();
    let selections: Vec<Vec<usize>> = (0..x.shape()[0])
        .map(|t| raw::top_k_indices(&logits[t * n..(t + 1) * n], cfg.top_k))
        .collect();
    route_two_stage_with_selection(tape, x, router, cfg, &routed_logits, &selections)
}

/// Routing with an externally fixed Top-K selection. Gradient checks
/// perturb inputs while holding the (piecewise-constant) selection fixed.
pub fn route_two_stage_with_selection(
    tape: &Tape,
    x: &Tensor,
    router: &RouterState,
    cfg: &MoHConfig,
    routed_logits: &Tensor,
    selections: &[Vec<usize>],
) -> Result<RoutingDecision> {
    let tokens = x.shape()[0];
    let n = cfg.routed_heads();
    if selections.len() != tokens {
        return Err(MohError::Contract(format!(
            "{} tokens but {} selection sets",
            tokens,
            selections.len()
        )));
    }
    for sel in selections {
        if sel.len() != cfg.top_k {
            return Err(MohError::Contract(format!(
                "selection set size {} != top_k {}",
                sel.len(),
                cfg.top_k
            )));
        }
        if let Some(&i) = sel.iter().find(|&&i| i >= n) {
            return Err(MohError::Contract(format!(
                "routed head index {i} out of {n}"
            )));
        }
    }

    let alpha_logits = tape.matmul_nt(x, &router.w_head_type)?;
    let alpha = tape.softmax_lastdim(&alpha_logits);
    let alpha1 = tape.select_column(&alpha, 0)?;
    let alpha2 = tape.select_column(&alpha, 1)?;

    let routed_probs = tape.softmax_lastdim(routed_logits);
    let mut mask = vec![0.0; tokens * n];
    for (t, sel) in selections.iter().enumerate() {
        for &i in sel {
            mask[t * n + i] = 1.0;
        }
    }
    let mask = Tensor::from_vec(&[tokens, n], mask)?;
    let masked = tape.mul(&routed_probs, &mask)?;
    let routed_gates = tape.scale_rows(&masked, &alpha2)?;

    let gates = if cfg.shared_heads > 0 {
        let shared_logits = tape.matmul_nt(x, &router.w_shared)?;
        let shared_probs = tape.softmax_lastdim(&shared_logits);
        let shared_gates = tape.scale_rows(&shared_probs, &alpha1)?;
        tape.concat_cols(&[&shared_gates, &routed_gates])?
    } else {
        routed_gates
    };

    let activated = selections
        .iter()
        .map(|sel| {
            let mut idx: Vec<usize> = (0..cfg.shared_heads).collect();
            idx.extend(sel.iter().map(|&i| cfg.shared_heads + i));
            idx
        })
        .collect();

    Ok(RoutingDecision {
        gates,
        activated,
        alpha: Some(alpha),
        routed_probs: Some(routed_probs),
        routed_selections: selections.to_vec(),
    })
}

/// Gated summation-form attention: per token, Σᵢ gᵢ·(Hⁱ·W_Oⁱ). Heads whose
/// gate is zero for every token in the batch are skipped entirely.
pub fn moh_forward(
    tape: &Tape,
    x: &Tensor,
    x_ctx: &Tensor,
    w: &MHAWeights,
    decision: &RoutingDecision,
) -> Result<Tensor> {
    if decision.heads() != w.heads {
        return Err(MohError::ShapeMismatch {
            op: "moh_forward (gates vs heads)",
            lhs: decision.gates.shape(),
            rhs: vec![w.heads],
        });
    }
    let tokens = x.shape()[0];
    if decision.tokens() != tokens {
        return Err(MohError::ShapeMismatch {
            op: "moh_forward (gates vs tokens)",
            lhs: decision.gates.shape(),
            rhs: x.shape(),
        });
    }
    let gate_data = decision.gates.data();
    let mut acc: Option<Tensor> = None;
    for i in 0..w.heads {
        if (0..tokens).all(|t| gate_data[t * w.heads + i] == 0.0) {
            continue;
        }
        let q = tape.matmul(x, &w.w_q[i])?;
        let k = tape.matmul(x_ctx, &w.w_k[i])?;
        let v = tape.matmul(x_ctx, &w.w_v[i])?;
        let h = crate::attention::scaled_dot_product_attention(tape, &q, &k, &v)?;
        let proj = tape.matmul(&h, &w.w_o_rows[i])?;
        let gate = tape.select_column(&decision.gates, i)?;
        let contrib = tape.scale_rows(&proj, &gate)?;
        acc = Some(match acc {
            None => contrib,
            Some(prev) => tape.add(&prev, &contrib)?,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::zeros(&[tokens, w.d_out])))
}

/// Per-head mean routing probability and selection frequency.
#[derive(Clone, Debug)]
pub struct LoadBalanceStats {
    /// Mean routed softmax probability per routed head; sums to 1.
    pub p: Vec<f64>,
    /// Fraction of tokens selecting each routed head; sums to K.
    pub f: Vec<f64>,
}

/// L_b = Σᵢ Pᵢ·fᵢ over routed heads. The selection frequency f is a count
/// through the indicator and carries no gradient; gradient reaches the
/// router only through P.
pub fn load_balance_loss(
    tape: &Tape,
    routed_probs: &Tensor,
    selections: &[Vec<usize>],
    top_k: usize,
) -> Result<(Tensor, LoadBalanceStats)> {
    let shape = routed_probs.shape();
    let (tokens, n) = (shape[0], shape[1]);
    if selections.len() != tokens {
        return Err(MohError::Contract(format!(
            "{} tokens but {} selection sets",
            tokens,
            selections.len()
        )));
    }
    let mut f = vec![0.0; n];
    for sel in selections {
        if sel.len() != top_k {
            return Err(MohError::Contract(format!(
                "selection set size {} != top_k {}",
                sel.len(),
                top_k
            )));
        }
        for &i in sel {
            if i >= n {
                return Err(MohError::Contract(format!(
                    "routed head index {} out of {}",
                    i, n
                )));
            }
            f[i] += 1.0;
        }
    }
    for v in f.iter_mut() {
        *v /= tokens as f64;
    }

    let p = tape.mean_axis0(routed_probs)?;
    let f_const = Tensor::from_vec(&[1, n], f.clone())?;
    let loss = tape.sum_all(&tape.mul(&p, &f_const)?);
    let stats = LoadBalanceStats { p: p.data(), f };
    Ok((loss, stats))
}

/// L = L_task + β·L_b.
pub fn total_loss(tape: &Tape, task: &Tensor, lb: &Tensor, beta: f64) -> Result<Tensor> {
    if beta < 0.0 {
        return Err(MohError::Config(format!("beta must be >= 0, got {beta}")));
    }
    tape.add(task, &tape.scale(lb, beta))
}

/// A complete MoH attention layer: weights plus whichever router the
/// config calls for.
#[derive(Clone)]
pub struct MoHAttention {
    pub cfg: MoHConfig,
    pub weights: MHAWeights,
    pub router: Router,
}

#[derive(Clone)]
pub enum Router {
    Learned(RouterState),
    ParameterFree,
}

impl MoHAttention {
    pub fn forward(&self, tape: &Tape, x: &Tensor, x_ctx: &Tensor) -> Result<(Tensor, RoutingDecision)> {
        let decision = match &self.router {
            Router::Learned(state) => route_two_stage(tape, x, state, &self.cfg)?,
            Router::ParameterFree => {
                let q_heads: Vec<Tensor> = self
                    .weights
                    .w_q
                    .iter()
                    .map(|wq| tape.matmul(x, wq))
                    .collect::<Result<_>>()?;
                crate::retrofit::parameter_free_route(
                    tape,
                    &q_heads,
                    &crate::retrofit::RetrofitPlan {
                        shared_heads: self.cfg.shared_heads,
                        top_k: self.cfg.top_k,
                    },
                )?
            }
        };
        let out = moh_forward(tape, x, x_ctx, &self.weights, &decision)?;
        Ok((out, decision))
    }
}
