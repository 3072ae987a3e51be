//! Desk-scale training loop: a single attention layer (dense or MoH) with
//! mean pooling and a linear classifier, optimized by SGD with optional
//! momentum and gradient clipping on the combined task + balance objective.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{multi_head_sum, MHAWeights};
use crate::error::{MohError, Result};
use crate::moh::{
    load_balance_loss, moh_forward, route_two_stage, total_loss, MoHConfig, RouterMode,
    RouterState, RoutingDecision,
};
use crate::retrofit::{parameter_free_route, RetrofitPlan};
use crate::task::{gen_task, Sample, TaskSpec};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelMode {
    /// Plain multi-head attention (summation form), no router.
    Dense,
    /// Gated MoH attention; the router comes from `MoHConfig.router_mode`.
    Moh,
}

/// Attention layer + mean pooling + linear classifier.
#[derive(Clone)]
pub struct Model {
    pub mode: ModelMode,
    pub cfg: MoHConfig,
    pub num_classes: usize,
    pub weights: MHAWeights,
    /// Present only for the learned MoH router.
    pub router: Option<RouterState>,
    pub w_cls: Tensor,
    pub b_cls: Tensor,
}

impl Model {
    pub fn new(
        mode: ModelMode,
        cfg: MoHConfig,
        num_classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Model> {
        cfg.validate()?;
        let weights =
            MHAWeights::random(cfg.heads, cfg.d_in, cfg.d_k, cfg.d_v, cfg.d_out, rng)?.trainable();
        let router = match (mode, cfg.router_mode) {
            (ModelMode::Moh, RouterMode::LearnedTwoStage) => {
                Some(RouterState::random(&cfg, rng).trainable())
            }
            _ => None,
        };
        let w_cls = Tensor::randn(&[cfg.d_out, num_classes], 1.0 / (cfg.d_out as f64).sqrt(), rng)
            .with_grad();
        let b_cls = Tensor::zeros(&[1, num_classes]).with_grad();
        Ok(Model {
            mode,
            cfg,
            num_classes,
            weights,
            router,
            w_cls,
            b_cls,
        })
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = self.weights.all_params();
        if let Some(r) = &self.router {
            out.extend(r.all_params());
        }
        out.push(("cls/w".into(), self.w_cls.clone()));
        out.push(("cls/b".into(), self.b_cls.clone()));
        out
    }

    /// Attention output for one sequence, with the routing decision when a
    /// router is in play.
    pub fn attention_forward(
        &self,
        tape: &Tape,
        x: &Tensor,
    ) -> Result<(Tensor, Option<RoutingDecision>)> {
        match self.mode {
            ModelMode::Dense => Ok((multi_head_sum(tape, x, x, &self.weights)?, None)),
            ModelMode::Moh => {
                let decision = match self.cfg.router_mode {
                    RouterMode::LearnedTwoStage => {
                        let router = self.router.as_ref().ok_or_else(|| {
                            MohError::Config("learned MoH model is missing router weights".into())
                        })?;
                        route_two_stage(tape, x, router, &self.cfg)?
                    }
                    RouterMode::ParameterFree => {
                        let q_heads: Vec<Tensor> = self
                            .weights
                            .w_q
                            .iter()
                            .map(|wq| tape.matmul(x, wq))
                            .collect::<Result<_>>()?;
                        parameter_free_route(
                            tape,
                            &q_heads,
                            &RetrofitPlan {
                                shared_heads: self.cfg.shared_heads,
                                top_k: self.cfg.top_k,
                            },
                        )?
                    }
                };
                let out = moh_forward(tape, x, x, &self.weights, &decision)?;
                Ok((out, Some(decision)))
            }
        }
    }

    /// Class logits `[1 × num_classes]` for one sequence.
    pub fn logits(
        &self,
        tape: &Tape,
        x: &Tensor,
    ) -> Result<(Tensor, Option<RoutingDecision>)> {
        let (attn, decision) = self.attention_forward(tape, x)?;
        let pooled = tape.mean_axis0(&attn)?;
        let scores = tape.matmul(&pooled, &self.w_cls)?;
        let logits = tape.add(&scores, &self.b_cls)?;
        Ok((logits, decision))
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub moh: MoHConfig,
    pub mode: ModelMode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub clip_norm: Option<f64>,
    pub eval_interval: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.moh.validate()?;
        if self.learning_rate < 0.0 || self.momentum < 0.0 {
            return Err(MohError::Config("learning_rate and momentum must be >= 0".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(MohError::Config(
                "steps, batch_size and eval_interval must be positive".into(),
            ));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(MohError::Config("clip_norm must be > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: f64,
    pub lb_loss: f64,
    pub accuracy: f64,
    /// Selection frequency per routed head over the eval pass; empty for
    /// dense models.
    pub routed_f: Vec<f64>,
}

pub const METRICS_CSV_HEADER: &str = "step,task_loss,lb_loss,accuracy,routed_f";

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        let f = r
            .routed_f
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        writeln!(
            out,
            "{},{:.8},{:.8},{:.6},{}",
            r.step, r.task_loss, r.lb_loss, r.accuracy, f
        )?;
    }
    Ok(())
}

pub struct EvalResult {
    pub accuracy: f64,
    pub mean_task_loss: f64,
    pub decisions: Vec<RoutingDecision>,
    /// Routed-head selection frequencies over every token seen.
    pub routed_f: Vec<f64>,
}

/// Forward-only evaluation over a set of samples.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalResult> {
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut decisions = Vec::new();
    let routed = model.cfg.routed_heads();
    let mut counts = vec![0usize; routed];
    let mut tokens = 0usize;
    for s in samples {
        let tape = Tape::new();
        let (logits, decision) = model.logits(&tape, &s.input)?;
        let data = logits.data();
        let pred = (0..model.num_classes)
            .max_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap())
            .unwrap();
        if pred == s.label {
            correct += 1;
        }
        loss_sum += tape.cross_entropy_logits(&logits, &[s.label])?.item();
        if let Some(d) = decision {
            for sel in &d.routed_selections {
                for &i in sel {
                    if i < routed {
                        counts[i] += 1;
                    }
                }
            }
            tokens += d.tokens();
            decisions.push(d);
        }
    }
    let routed_f = if tokens > 0 {
        counts.iter().map(|&c| c as f64 / tokens as f64).collect()
    } else {
        Vec::new()
    };
    Ok(EvalResult {
        accuracy: correct as f64 / samples.len() as f64,
        mean_task_loss: loss_sum / samples.len() as f64,
        decisions,
        routed_f,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    pub final_step: usize,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

/// Run the full loop on a generated task. Aborts with a diagnostic if the
/// loss stops being finite.
pub fn train(cfg: &TrainConfig, task: &TaskSpec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = gen_task(task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(cfg.mode, cfg.moh, task.num_classes, &mut rng)?;
    let params = model.params();
    let mut velocity: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect();
    let mut metrics = Vec::new();

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let mut task_losses: Vec<Tensor> = Vec::with_capacity(cfg.batch_size);
        let mut lb_losses: Vec<Tensor> = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let s = &dataset.train[(step * cfg.batch_size + b) % dataset.train.len()];
            let (logits, decision) = model.logits(&tape, &s.input)?;
            task_losses.push(tape.cross_entropy_logits(&logits, &[s.label])?);
            if let Some(d) = decision {
                if let Some(probs) = d.routed_probs.as_ref() {
                    let (lb, _) =
                        load_balance_loss(&tape, probs, &d.routed_selections, model.cfg.top_k)?;
                    lb_losses.push(lb);
                }
            }
        }
        let mean_of = |tape: &Tape, terms: &[Tensor]| -> Result<Tensor> {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = tape.add(&acc, t)?;
            }
            Ok(tape.scale(&acc, 1.0 / terms.len() as f64))
        };
        let task_loss = mean_of(&tape, &task_losses)?;
        let loss = if lb_losses.is_empty() {
            task_loss.clone()
        } else {
            let lb = mean_of(&tape, &lb_losses)?;
            total_loss(&tape, &task_loss, &lb, model.cfg.beta)?
        };
        if !loss.item().is_finite() {
            return Err(MohError::Diverged {
                step,
                detail: format!("loss = {}", loss.item()),
            });
        }
        tape.backward(&loss)?;

        // Global-norm gradient clipping.
        let mut scale = 1.0;
        if let Some(clip) = cfg.clip_norm {
            let mut sq = 0.0;
            for (_, p) in &params {
                if let Some(g) = p.grad() {
                    sq += g.iter().map(|v| v * v).sum::<f64>();
                }
            }
            let norm = sq.sqrt();
            if norm > clip {
                scale = clip / norm;
            }
        }
        for ((_, p), v) in params.iter().zip(velocity.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let mut data = p.data();
            for i in 0..data.len() {
                v[i] = cfg.momentum * v[i] + scale * g[i];
                data[i] -= cfg.learning_rate * v[i];
            }
            p.set_data(data)?;
            p.zero_grad();
        }

        let last = step + 1 == cfg.steps;
        if (step + 1) % cfg.eval_interval == 0 || last {
            let eval = evaluate(&model, &dataset.train)?;
            metrics.push(MetricsRow {
                step: step + 1,
                task_loss: eval.mean_task_loss,
                lb_loss: lb_losses
                    .iter()
                    .map(|t| t.item())
                    .sum::<f64>()
                    / lb_losses.len().max(1) as f64,
                accuracy: eval.accuracy,
                routed_f: eval.routed_f,
            });
        }
    }

    Ok(TrainOutcome {
        model,
        metrics,
        final_step: cfg.steps,
        rng_seed: cfg.seed,
        rng_word_pos: rng.get_word_pos(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::TaskKind;

    fn toy_task() -> TaskSpec {
        TaskSpec {
            kind: TaskKind::SequenceClassification,
            feature_dim: 8,
            seq_len: 6,
            num_classes: 2,
            num_clusters: 4,
            train_samples: 24,
            test_samples: 12,
            seed: 5,
        }
    }

    fn moh_cfg() -> MoHConfig {
        MoHConfig {
            heads: 4,
            shared_heads: 1,
            top_k: 2,
            d_in: 8,
            d_k: 8,
            d_v: 8,
            d_out: 8,
            beta: 0.01,
            router_mode: RouterMode::LearnedTwoStage,
        }
    }

    fn train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            moh: moh_cfg(),
            mode: ModelMode::Moh,
            learning_rate: 0.05,
            momentum: 0.9,
            steps,
            batch_size: 8,
            clip_norm: Some(1.0),
            eval_interval: 10,
            seed: 7,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_weights_bit_exact() {
        let mut cfg = train_cfg(5);
        cfg.learning_rate = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let reference = Model::new(cfg.mode, cfg.moh, 2, &mut rng).unwrap();
        let outcome = train(&cfg, &toy_task()).unwrap();
        for ((_, a), (_, b)) in reference.params().iter().zip(outcome.model.params().iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = train_cfg(20);
        let a = train(&cfg, &toy_task()).unwrap();
        let b = train(&cfg, &toy_task()).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(ra.task_loss.to_bits(), rb.task_loss.to_bits());
            assert_eq!(ra.accuracy.to_bits(), rb.accuracy.to_bits());
        }
    }

    #[test]
    fn loss_decreases_over_training() {
        let mut cfg = train_cfg(60);
        cfg.eval_interval = 1;
        let outcome = train(&cfg, &toy_task()).unwrap();
        let losses: Vec<f64> = outcome.metrics.iter().map(|m| m.task_loss).collect();
        let head = &losses[..6];
        let tail = &losses[losses.len() - 6..];
        let median = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(
            median(tail) < median(head),
            "tail {} vs head {}",
            median(tail),
            median(head)
        );
    }

    #[test]
    fn dense_mode_trains_without_router() {
        let mut cfg = train_cfg(10);
        cfg.mode = ModelMode::Dense;
        let outcome = train(&cfg, &toy_task()).unwrap();
        assert!(outcome.model.router.is_none());
        assert!(outcome.metrics.iter().all(|m| m.routed_f.is_empty()));
    }

    #[test]
    fn metrics_csv_has_fixed_header() {
        let rows = vec![MetricsRow {
            step: 10,
            task_loss: 0.5,
            lb_loss: 0.66,
            accuracy: 0.875,
            routed_f: vec![0.5, 0.75, 0.75],
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(METRICS_CSV_HEADER));
        assert!(text.contains("0.500000;0.750000;0.750000"));
    }
}
