//! Deterministic synthetic tasks with planted cluster structure, so head
//! specialization has something to latch onto at desk scale.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MohError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Every token is drawn from one of the label's clusters.
    SequenceClassification,
    /// One needle token carries the class signature; the rest is noise.
    NeedleCopy,
}

#[derive(Clone, Debug)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub feature_dim: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    /// Latent token-pattern groups; clusters are assigned to classes
    /// round-robin, so `num_clusters >= num_classes`.
    pub num_clusters: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.seq_len == 0 || self.num_classes < 2 {
            return Err(MohError::Config(
                "task needs feature_dim >= 1, seq_len >= 1, num_classes >= 2".into(),
            ));
        }
        if self.num_clusters < self.num_classes {
            return Err(MohError::Config(format!(
                "num_clusters ({}) must be >= num_classes ({})",
                self.num_clusters, self.num_classes
            )));
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return Err(MohError::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// One labelled sequence: `[seq_len × feature_dim]` tokens.
#[derive(Clone)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Unit prototype vectors, one per cluster; cluster c belongs to class
    /// `c % num_classes`.
    pub prototypes: Vec<Vec<f64>>,
}

const TOKEN_NOISE: f64 = 0.25;

fn unit_prototype(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm.max(1e-12);
    }
    v
}

fn gen_split(
    spec: &TaskSpec,
    prototypes: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    for s in 0..count {
        // Round-robin labels keep the split balanced.
        let label = s % spec.num_classes;
        let class_clusters: Vec<usize> = (0..spec.num_clusters)
            .filter(|c| c % spec.num_classes == label)
            .collect();
        let mut data = Vec::with_capacity(spec.seq_len * spec.feature_dim);
        match spec.kind {
            TaskKind::SequenceClassification => {
                for _ in 0..spec.seq_len {
                    let c = class_clusters[rng.gen_range(0..class_clusters.len())];
                    for &p in &prototypes[c] {
                        let noise: f64 = StandardNormal.sample(rng);
                        data.push(p + TOKEN_NOISE * noise);
                    }
                }
            }
            TaskKind::NeedleCopy => {
                let needle_pos = rng.gen_range(0..spec.seq_len);
                let c = class_clusters[rng.gen_range(0..class_clusters.len())];
                for t in 0..spec.seq_len {
                    for &p in &prototypes[c] {
                        let noise: f64 = StandardNormal.sample(rng);
                        if t == needle_pos {
                            // Strong signature so attention can retrieve it.
                            data.push(3.0 * p + TOKEN_NOISE * noise);
                        } else {
                            data.push(TOKEN_NOISE * noise);
                        }
                    }
                }
            }
        }
        out.push(Sample {
            input: Tensor::from_vec(&[spec.seq_len, spec.feature_dim], data)?,
            label,
        });
    }
    Ok(out)
}

/// Deterministic dataset generation: the same `(spec, seed)` always yields
/// the same samples.
pub fn gen_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<f64>> = (0..spec.num_clusters)
        .map(|_| unit_prototype(spec.feature_dim, &mut rng))
        .collect();
    let train = gen_split(spec, &prototypes, spec.train_samples, &mut rng)?;
    let test = gen_split(spec, &prototypes, spec.test_samples, &mut rng)?;
    Ok(Dataset {
        train,
        test,
        prototypes,
    })
}

/// Nearest-prototype linear probe on mean-pooled raw features; the
/// reference floor a trained model should meet or beat.
pub fn linear_probe_accuracy(dataset: &Dataset, num_classes: usize) -> f64 {
    // Class centroids of mean-pooled training features.
    let dim = dataset.train[0].input.shape()[1];
    let mut centroids = vec![vec![0.0; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let pooled = |s: &Sample| -> Vec<f64> {
        let shape = s.input.shape();
        let (t, d) = (shape[0], shape[1]);
        let data = s.input.data();
        let mut m = vec![0.0; d];
        for r in 0..t {
            for c in 0..d {
                m[c] += data[r * d + c];
            }
        }
        for v in m.iter_mut() {
            *v /= t as f64;
        }
        m
    };
    for s in &dataset.train {
        let m = pooled(s);
        for (c, v) in centroids[s.label].iter_mut().zip(&m) {
            *c += v;
        }
        counts[s.label] += 1;
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for v in c.iter_mut() {
            *v /= n.max(1) as f64;
        }
    }
    let mut correct = 0usize;
    for s in &dataset.test {
        let m = pooled(s);
        let best = (0..num_classes)
            .min_by(|&a, &b| {
                let da: f64 = centroids[a].iter().zip(&m).map(|(c, v)| (c - v) * (c - v)).sum();
                let db: f64 = centroids[b].iter().zip(&m).map(|(c, v)| (c - v) * (c - v)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        if best == s.label {
            correct += 1;
        }
    }
    correct as f64 / dataset.test.len() as f64
}
