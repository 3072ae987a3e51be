//! Post-hoc routing statistics: per-category head-load densities and the
//! redundancy metrics (attention-pattern similarity, output-feature
//! cosine).

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{MohError, Result};
use crate::moh::RoutingDecision;

/// Per-category activation density of every head: activations divided by
/// the category's token count. Shared heads sit at exactly 1.
#[derive(Clone, Debug)]
pub struct HeadLoadProfile {
    pub category: String,
    pub density: Vec<f64>,
    pub tokens: usize,
}

/// Categories present in `labels` but with zero tokens are impossible by
/// construction; empty inputs yield an empty profile list plus a warning
/// count for skipped entries.
pub fn head_load_density(
    decisions: &[RoutingDecision],
    labels: &[String],
) -> Result<Vec<HeadLoadProfile>> {
    if decisions.len() != labels.len() {
        return Err(MohError::Contract(format!(
            "{} decisions but {} labels",
            decisions.len(),
            labels.len()
        )));
    }
    if decisions.is_empty() {
        return Ok(Vec::new());
    }
    let heads = decisions[0].heads();
    let mut buckets: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (d, label) in decisions.iter().zip(labels) {
        if d.heads() != heads {
            return Err(MohError::Contract("decisions disagree on head count".into()));
        }
        let entry = buckets
            .entry(label.as_str())
            .or_insert_with(|| (vec![0.0; heads], 0));
        let gates = d.gates.data();
        for t in 0..d.tokens() {
            for i in 0..heads {
                if gates[t * heads + i] != 0.0 {
                    entry.0[i] += 1.0;
                }
            }
        }
        entry.1 += d.tokens();
    }
    Ok(buckets
        .into_iter()
        .map(|(category, (mut counts, tokens))| {
            for c in counts.iter_mut() {
                *c /= tokens as f64;
            }
            HeadLoadProfile {
                category: category.to_string(),
                density: counts,
                tokens,
            }
        })
        .collect())
}

/// 1 − ½·E[‖A−A'‖₁] over rows; both matrices must be row-stochastic, which
/// pins the result to [0, 1].
pub fn attention_pattern_similarity(a: &[f64], b: &[f64], row_len: usize) -> Result<f64> {
    if a.len() != b.len() || !a.len().is_multiple_of(row_len) {
        return Err(MohError::Contract(format!(
            "pattern sizes disagree: {} vs {} (row {})",
            a.len(),
            b.len(),
            row_len
        )));
    }
    for m in [a, b] {
        for row in m.chunks(row_len) {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(MohError::Contract(format!(
                    "attention rows must be stochastic, row sum {sum}"
                )));
            }
        }
    }
    let rows = a.len() / row_len;
    let mut total = 0.0;
    for (ra, rb) in a.chunks(row_len).zip(b.chunks(row_len)) {
        let l1: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum();
        total += l1;
    }
    Ok(1.0 - 0.5 * total / rows as f64)
}

/// Mean over tokens of the cosine between corresponding feature rows.
/// Zero-norm rows are skipped; the skipped count is returned alongside.
pub fn output_feature_cosine(a: &[f64], b: &[f64], row_len: usize) -> Result<(f64, usize)> {
    if a.len() != b.len() || !a.len().is_multiple_of(row_len) {
        return Err(MohError::Contract(format!(
            "feature sizes disagree: {} vs {} (row {})",
            a.len(),
            b.len(),
            row_len
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (ra, rb) in a.chunks(row_len).zip(b.chunks(row_len)) {
        let na: f64 = ra.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = rb.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            skipped += 1;
            continue;
        }
        let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
        total += dot / (na * nb);
        counted += 1;
    }
    if counted == 0 {
        return Err(MohError::Contract("all feature rows had zero norm".into()));
    }
    Ok((total / counted as f64, skipped))
}

/// Mean pairwise attention-pattern similarity over all unordered head
/// pairs, averaged across the supplied inputs' per-head patterns.
pub fn mean_pairwise_pattern_similarity(
    per_input_patterns: &[Vec<Vec<f64>>],
    row_len: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for patterns in per_input_patterns {
        let h = patterns.len();
        for i in 0..h {
            for j in i + 1..h {
                total += attention_pattern_similarity(&patterns[i], &patterns[j], row_len)?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(MohError::Contract("need at least two heads for pairwise similarity".into()));
    }
    Ok(total / pairs as f64)
}

pub fn write_head_load_csv<W: Write>(
    profiles: &[HeadLoadProfile],
    shared_heads: usize,
    mut out: W,
) -> Result<()> {
    writeln!(out, "category,head_index,head_type,density")?;
    for p in profiles {
        for (i, d) in p.density.iter().enumerate() {
            let kind = if i < shared_heads { "shared" } else { "routed" };
            writeln!(out, "{},{},{},{:.6}", p.category, i, kind, d)?;
        }
    }
    Ok(())
}

pub fn write_similarity_csv<W: Write>(
    rows: &[(usize, usize, f64, f64)],
    mut out: W,
) -> Result<()> {
    writeln!(out, "head_i,head_j,attn_sim,cos_sim")?;
    for (i, j, attn, cos) in rows {
        writeln!(out, "{i},{j},{attn:.6},{cos:.6}")?;
    }
    Ok(())
}
