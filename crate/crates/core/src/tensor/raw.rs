//! Shared flat-array kernels used by both the tape ops and the sparse
//! inference path.

/// out += A·B with A `[m×k]`, B `[k×n]`. `out` must hold `m*n` zeros (or a
/// partial sum to accumulate into).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += A·Bᵀ with A `[m×p]`, B `[q×p]`; result `[m×q]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, p: usize, q: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(out.len(), m * q);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        for j in 0..q {
            let brow = &b[j * p..(j + 1) * p];
            let mut acc = 0.0;
            for x in 0..p {
                acc += arow[x] * brow[x];
            }
            out[i * q + j] += acc;
        }
    }
}

/// out += Aᵀ·B with A `[m×k]`, B `[m×n]`; result `[k×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let brow = &b[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// In-place max-subtracted softmax over contiguous rows of width `n`.
pub fn softmax_rows(data: &mut [f64], n: usize) {
    debug_assert!(n >= 1);
    debug_assert_eq!(data.len() % n, 0);
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Indices of the `k` largest values, ties broken toward the lower index.
/// Returned sorted ascending for reproducible downstream iteration.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    debug_assert!(k <= values.len());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("top_k on non-finite values")
            .then(a.cmp(&b))
    });
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_picks_largest() {
        assert_eq!(top_k_indices(&[3.0, 1.0, 2.0, 0.5], 2), vec![0, 2]);
    }

    #[test]
    fn top_k_ties_break_toward_low_index() {
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn top_k_invariant_under_constant_shift() {
        let v = [0.3, -1.2, 0.9, 0.9, -0.4];
        for c in [-100.0, -1.0, 0.5, 1e6] {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            assert_eq!(top_k_indices(&v, 3), top_k_indices(&shifted, 3));
        }
    }
}
