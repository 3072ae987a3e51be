//! Flat `key=value` config files for training runs and tasks. Blank lines
//! and `#` comments are skipped; unknown keys are hard errors so typos
//! don't silently fall back to defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{MohError, Result};
use crate::moh::{MoHConfig, RouterMode};
use crate::task::{TaskKind, TaskSpec};
use crate::train::{ModelMode, TrainConfig};

fn parse_pairs(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| MohError::Parse {
            line: idx + 1,
            detail: format!("expected key=value, got {line:?}"),
        })?;
        let key = key.trim().to_string();
        if out
            .insert(key.clone(), (idx + 1, value.trim().to_string()))
            .is_some()
        {
            return Err(MohError::Parse {
                line: idx + 1,
                detail: format!("duplicate key {key:?}"),
            });
        }
    }
    Ok(out)
}

struct Fields {
    pairs: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.pairs.remove(key)
    }

    fn parsed<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take(key) {
            None => Ok(default),
            Some((line, v)) => v.parse().map_err(|_| MohError::Parse {
                line,
                detail: format!("cannot parse {key}={v:?}"),
            }),
        }
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, v) = self.take(key).ok_or_else(|| MohError::Parse {
            line: 0,
            detail: format!("missing required key {key:?}"),
        })?;
        v.parse().map_err(|_| MohError::Parse {
            line,
            detail: format!("cannot parse {key}={v:?}"),
        })
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.pairs.keys().next() {
            return Err(MohError::UnknownKey(key.clone()));
        }
        Ok(())
    }
}

/// Keys: `heads`, `shared_heads`, `top_k`, `d_in`, `d_k`, `d_v`, `d_out`,
/// `beta`, `router` (`learned`|`parameter_free`), `model`
/// (`dense`|`moh`), `lr`, `momentum`, `steps`, `batch_size`, `clip_norm`
/// (`none` to disable), `eval_interval`, `seed`.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let mut f = Fields {
        pairs: parse_pairs(text)?,
    };
    let heads: usize = f.required("heads")?;
    let d_in: usize = f.required("d_in")?;
    let router_mode = match f.take("router") {
        None => RouterMode::LearnedTwoStage,
        Some((line, v)) => match v.as_str() {
            "learned" => RouterMode::LearnedTwoStage,
            "parameter_free" => RouterMode::ParameterFree,
            other => {
                return Err(MohError::Parse {
                    line,
                    detail: format!("unknown router {other:?}"),
                })
            }
        },
    };
    let mode = match f.take("model") {
        None => ModelMode::Moh,
        Some((line, v)) => match v.as_str() {
            "dense" => ModelMode::Dense,
            "moh" => ModelMode::Moh,
            other => {
                return Err(MohError::Parse {
                    line,
                    detail: format!("unknown model {other:?}"),
                })
            }
        },
    };
    let clip_norm = match f.take("clip_norm") {
        None => Some(1.0),
        Some((_, v)) if v == "none" => None,
        Some((line, v)) => Some(v.parse().map_err(|_| MohError::Parse {
            line,
            detail: format!("cannot parse clip_norm={v:?}"),
        })?),
    };
    let cfg = TrainConfig {
        moh: MoHConfig {
            heads,
            shared_heads: f.parsed("shared_heads", 1)?,
            top_k: f.required("top_k")?,
            d_in,
            d_k: f.parsed("d_k", 2 * heads)?,
            d_v: f.parsed("d_v", 2 * heads)?,
            d_out: f.parsed("d_out", d_in)?,
            beta: f.parsed("beta", 0.01)?,
            router_mode,
        },
        mode,
        learning_rate: f.parsed("lr", 0.05)?,
        momentum: f.parsed("momentum", 0.9)?,
        steps: f.parsed("steps", 200)?,
        batch_size: f.parsed("batch_size", 8)?,
        clip_norm,
        eval_interval: f.parsed("eval_interval", 20)?,
        seed: f.parsed("seed", 0)?,
    };
    f.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

/// Keys: `kind` (`seq_class`|`needle`), `feature_dim`, `seq_len`,
/// `num_classes`, `num_clusters`, `train_samples`, `test_samples`, `seed`.
pub fn parse_task_spec(text: &str) -> Result<TaskSpec> {
    let mut f = Fields {
        pairs: parse_pairs(text)?,
    };
    let kind = match f.take("kind") {
        None => TaskKind::SequenceClassification,
        Some((line, v)) => match v.as_str() {
            "seq_class" => TaskKind::SequenceClassification,
            "needle" => TaskKind::NeedleCopy,
            other => {
                return Err(MohError::Parse {
                    line,
                    detail: format!("unknown task kind {other:?}"),
                })
            }
        },
    };
    let num_classes: usize = f.parsed("num_classes", 2)?;
    let spec = TaskSpec {
        kind,
        feature_dim: f.required("feature_dim")?,
        seq_len: f.required("seq_len")?,
        num_classes,
        num_clusters: f.parsed("num_clusters", 2 * num_classes)?,
        train_samples: f.parsed("train_samples", 64)?,
        test_samples: f.parsed("test_samples", 32)?,
        seed: f.parsed("seed", 0)?,
    };
    f.finish()?;
    spec.validate()?;
    Ok(spec)
}

pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    parse_train_config(&std::fs::read_to_string(path)?)
}

pub fn load_task_spec(path: &Path) -> Result<TaskSpec> {
    parse_task_spec(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRAIN: &str = "\
# tiny run
heads = 4
shared_heads = 1
top_k = 2
d_in = 8
beta = 0.02
model = moh
lr = 0.1
steps = 50
seed = 3
";

    #[test]
    fn train_config_parses_with_defaults() {
        let cfg = parse_train_config(TRAIN).unwrap();
        assert_eq!(cfg.moh.heads, 4);
        assert_eq!(cfg.moh.top_k, 2);
        assert_eq!(cfg.moh.d_k, 8); // default 2*heads
        assert_eq!(cfg.moh.d_out, 8); // default d_in
        assert!((cfg.moh.beta - 0.02).abs() < 1e-15);
        assert_eq!(cfg.steps, 50);
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.clip_norm, Some(1.0));
    }

    #[test]
    fn unknown_key_is_an_error() {
        let text = format!("{TRAIN}warmup = 5\n");
        assert!(matches!(
            parse_train_config(&text),
            Err(MohError::UnknownKey(k)) if k == "warmup"
        ));
    }

    #[test]
    fn duplicate_and_malformed_lines_are_line_numbered() {
        let err = parse_train_config("heads = 4\nheads = 8\n").unwrap_err();
        assert!(matches!(err, MohError::Parse { line: 2, .. }));
        let err = parse_train_config("heads 4\n").unwrap_err();
        assert!(matches!(err, MohError::Parse { line: 1, .. }));
        let err = parse_train_config("heads = four\ntop_k = 1\nd_in = 4\n").unwrap_err();
        assert!(matches!(err, MohError::Parse { line: 1, .. }));
    }

    #[test]
    fn clip_norm_none_disables_clipping() {
        let text = format!("{TRAIN}clip_norm = none\n");
        assert_eq!(parse_train_config(&text).unwrap().clip_norm, None);
    }

    #[test]
    fn invalid_architecture_is_rejected_after_parsing() {
        let text = "heads = 4\nshared_heads = 4\ntop_k = 1\nd_in = 8\n";
        assert!(matches!(parse_train_config(text), Err(MohError::Config(_))));
    }

    #[test]
    fn task_spec_round_trip() {
        let spec = parse_task_spec(
            "kind = needle\nfeature_dim = 8\nseq_len = 6\nnum_classes = 3\nnum_clusters = 6\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(spec.kind, TaskKind::NeedleCopy);
        assert_eq!(spec.num_clusters, 6);
        assert_eq!(spec.seed, 9);
        assert_eq!(spec.train_samples, 64);
    }

    #[test]
    fn missing_required_key_is_reported() {
        let err = parse_task_spec("seq_len = 6\n").unwrap_err();
        assert!(matches!(err, MohError::Parse { .. }));
    }
}
