//! Dense f64 tensors with a tape-based reverse-mode autodiff engine.
//!
//! The op set is intentionally small: exactly what the attention layer,
//! the router and the training losses need. Shapes are explicit, storage
//! is flat row-major, and there is no broadcasting beyond the few
//! row/column-wise ops below.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{MohError, Result};

pub mod raw;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// A dense tensor of 64-bit reals with an optional gradient slot.
///
/// Cheap to clone (shared storage). Values are immutable once created by a
/// forward op; only the grad slot mutates during backward.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MohError::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: consistent by construction")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).expect("scalar")
    }

    /// Standard-normal init scaled by `std`, for parameter tensors.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data).expect("randn")
    }

    /// Mark this tensor as a trainable leaf.
    pub fn with_grad(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Single-element access for scalar tensors.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        debug_assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite the stored values in place. Shape must be preserved.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(MohError::Contract(format!(
                "set_data: expected {} elements, got {}",
                inner.data.len(),
                data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// Copy with the same values, detached from any grad bookkeeping.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(&inner.shape, inner.data.clone()).expect("detach")
    }

    pub fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        debug_assert_eq!(delta.len(), inner.data.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    pub fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let inner = self.inner.borrow();
        match inner.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            _ => Err(MohError::ShapeMismatch {
                op,
                lhs: inner.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

/// Per-backward-call adjoint accumulator, keyed by tensor identity.
///
/// Adjoints live here during the reverse sweep and are flushed into each
/// tensor's grad slot at the end, so repeated backward calls over one tape
/// accumulate additively without double-counting stale adjoints.
struct GradStore {
    map: HashMap<usize, (Tensor, Vec<f64>)>,
}

impl GradStore {
    fn new() -> Self {
        GradStore {
            map: HashMap::new(),
        }
    }

    fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.map.get(&t.ptr_id()).map(|(_, g)| g.as_slice())
    }

    fn add(&mut self, t: &Tensor, delta: Vec<f64>) {
        match self.map.get_mut(&t.ptr_id()) {
            Some((_, g)) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => {
                self.map.insert(t.ptr_id(), (t.clone(), delta));
            }
        }
    }
}

type BackwardFn = Box<dyn Fn(&mut GradStore)>;

/// Records forward ops in topological order; `backward` replays them in
/// reverse to populate gradients.
pub struct Tape {
    ops: RefCell<Vec<BackwardFn>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, f: BackwardFn) {
        self.ops.borrow_mut().push(f);
    }

    pub fn op_count(&self) -> usize {
        self.ops.borrow().len()
    }

    /// Reverse sweep from a scalar loss. Every tensor on a grad path gets
    /// its adjoint added into its grad slot (leaves and intermediates alike).
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(MohError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut store = GradStore::new();
        store.add(loss, vec![1.0]);
        for op in self.ops.borrow().iter().rev() {
            op(&mut store);
        }
        for (t, adj) in store.map.values() {
            t.accumulate_grad(adj);
        }
        Ok(())
    }

    fn track(&self, inputs: &[&Tensor], out: &Tensor) -> bool {
        let any = inputs.iter().any(|t| t.requires_grad());
        if any {
            out.inner.borrow_mut().requires_grad = true;
        }
        any
    }

    // ---- binary ops ----

    /// C = A·B for 2-D operands.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.dims2("matmul")?;
        let (kb, n) = b.dims2("matmul")?;
        if ka != kb {
            return Err(MohError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![0.0; m * n];
        raw::matmul(&a.data(), &b.data(), m, ka, n, &mut out);
        let c = Tensor::from_vec(&[m, n], out)?;
        if self.track(&[a, b], &c) {
            let (a, b, c2) = (a.clone(), b.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let (ad, bd) = (a.data(), b.data());
                // dA = dC·Bᵀ
                let mut da = vec![0.0; m * ka];
                raw::matmul_nt(&dc, &bd, m, n, ka, &mut da);
                store.add(&a, da);
                // dB = Aᵀ·dC
                let mut db = vec![0.0; ka * n];
                raw::matmul_tn(&ad, &dc, m, ka, n, &mut db);
                store.add(&b, db);
            }));
        }
        Ok(c)
    }

    /// C = A·Bᵀ, with A `[m×p]` and B `[q×p]`.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, pa) = a.dims2("matmul_nt")?;
        let (q, pb) = b.dims2("matmul_nt")?;
        if pa != pb {
            return Err(MohError::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = vec![0.0; m * q];
        raw::matmul_nt(&a.data(), &b.data(), m, pa, q, &mut out);
        let c = Tensor::from_vec(&[m, q], out)?;
        if self.track(&[a, b], &c) {
            let (a, b, c2) = (a.clone(), b.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let (ad, bd) = (a.data(), b.data());
                // dA = dC·B
                let mut da = vec![0.0; m * pa];
                raw::matmul(&dc, &bd, m, q, pa, &mut da);
                store.add(&a, da);
                // dB = dCᵀ·A
                let mut db = vec![0.0; q * pa];
                raw::matmul_tn(&dc, &ad, m, q, pa, &mut db);
                store.add(&b, db);
            }));
        }
        Ok(c)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise("add", a, b, |x, y| x + y, |_x, _y, d| (d, d))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, |_x, _y, d| (d, -d))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, |x, y, d| (d * y, d * x))
    }

    fn zip_elementwise(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        fwd: fn(f64, f64) -> f64,
        bwd: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(MohError::ShapeMismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let shape = a.shape();
        let out: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let c = Tensor::from_vec(&shape, out)?;
        if self.track(&[a, b], &c) {
            let (a, b, c2) = (a.clone(), b.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let (ad, bd) = (a.data(), b.data());
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for i in 0..ad.len() {
                    let (ga, gb) = bwd(ad[i], bd[i], dc[i]);
                    da[i] = ga;
                    db[i] = gb;
                }
                if a.requires_grad() || store.get(&a).is_some() {
                    store.add(&a, da);
                }
                if b.requires_grad() || store.get(&b).is_some() {
                    store.add(&b, db);
                }
            }));
        }
        Ok(c)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, a: &Tensor, factor: f64) -> Tensor {
        let shape = a.shape();
        let out: Vec<f64> = a.data().iter().map(|&x| x * factor).collect();
        let c = Tensor::from_vec(&shape, out).expect("scale");
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2) else { return };
                let da: Vec<f64> = dc.iter().map(|&d| d * factor).collect();
                store.add(&a, da);
            }));
        }
        c
    }

    /// Numerically stabilized softmax over the last dimension.
    pub fn softmax_lastdim(&self, a: &Tensor) -> Tensor {
        let shape = a.shape();
        let n = *shape.last().expect("softmax on rank >= 1");
        let mut out = a.data();
        raw::softmax_rows(&mut out, n);
        let c = Tensor::from_vec(&shape, out).expect("softmax");
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let y = c2.data();
                let mut da = vec![0.0; y.len()];
                for r in 0..y.len() / n {
                    let (ys, ds) = (&y[r * n..(r + 1) * n], &dc[r * n..(r + 1) * n]);
                    let dot: f64 = ys.iter().zip(ds).map(|(&yi, &di)| yi * di).sum();
                    for j in 0..n {
                        da[r * n + j] = ys[j] * (ds[j] - dot);
                    }
                }
                store.add(&a, da);
            }));
        }
        c
    }

    pub fn sum_all(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.data().iter().sum();
        let c = Tensor::scalar(s);
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            let n = a.numel();
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2) else { return };
                store.add(&a, vec![dc[0]; n]);
            }));
        }
        c
    }

    /// Column means of a 2-D tensor: `[m×n] -> [1×n]`.
    pub fn mean_axis0(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2("mean_axis0")?;
        let data = a.data();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += data[r * n + j];
            }
        }
        for v in out.iter_mut() {
            *v /= m as f64;
        }
        let c = Tensor::from_vec(&[1, n], out)?;
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = dc[j] / m as f64;
                    }
                }
                store.add(&a, da);
            }));
        }
        Ok(c)
    }

    /// Extract column `j` of a 2-D tensor as `[m×1]`.
    pub fn select_column(&self, a: &Tensor, j: usize) -> Result<Tensor> {
        let (m, n) = a.dims2("select_column")?;
        if j >= n {
            return Err(MohError::Contract(format!(
                "select_column: index {} out of {} columns",
                j, n
            )));
        }
        let data = a.data();
        let out: Vec<f64> = (0..m).map(|r| data[r * n + j]).collect();
        let c = Tensor::from_vec(&[m, 1], out)?;
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + j] = dc[r];
                }
                store.add(&a, da);
            }));
        }
        Ok(c)
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(MohError::Contract("concat_cols of zero tensors".into()));
        }
        let (m, _) = parts[0].dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (mp, np) = p.dims2("concat_cols")?;
            if mp != m {
                return Err(MohError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: p.shape(),
                });
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pd = p.data();
            for r in 0..m {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let c = Tensor::from_vec(&[m, total], out)?;
        if self.track(parts, &c) {
            let parts: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
            let c2 = c.clone();
            let widths2 = widths.clone();
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths2) {
                    let mut dp = vec![0.0; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&dc[r * total + offset..r * total + offset + w]);
                    }
                    store.add(p, dp);
                    offset += w;
                }
            }));
        }
        Ok(c)
    }

    /// Scale each row of `a` `[m×n]` by the matching entry of `s` `[m×1]`.
    pub fn scale_rows(&self, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2("scale_rows")?;
        let (ms, ns) = s.dims2("scale_rows")?;
        if ms != m || ns != 1 {
            return Err(MohError::ShapeMismatch {
                op: "scale_rows",
                lhs: a.shape(),
                rhs: s.shape(),
            });
        }
        let (ad, sd) = (a.data(), s.data());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for j in 0..n {
                out[r * n + j] = ad[r * n + j] * sd[r];
            }
        }
        let c = Tensor::from_vec(&[m, n], out)?;
        if self.track(&[a, s], &c) {
            let (a, s, c2) = (a.clone(), s.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let (ad, sd) = (a.data(), s.data());
                let mut da = vec![0.0; m * n];
                let mut ds = vec![0.0; m];
                for r in 0..m {
                    for j in 0..n {
                        da[r * n + j] = dc[r * n + j] * sd[r];
                        ds[r] += dc[r * n + j] * ad[r * n + j];
                    }
                }
                store.add(&a, da);
                store.add(&s, ds);
            }));
        }
        Ok(c)
    }

    /// Per-row Euclidean norm: `[m×n] -> [m×1]`.
    pub fn row_norm(&self, a: &Tensor) -> Result<Tensor> {
        let (m, n) = a.dims2("row_norm")?;
        if n == 0 {
            return Err(MohError::Contract("row_norm of empty rows".into()));
        }
        let ad = a.data();
        let out: Vec<f64> = (0..m)
            .map(|r| ad[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let c = Tensor::from_vec(&[m, 1], out)?;
        if self.track(&[a], &c) {
            let (a, c2) = (a.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                let ad = a.data();
                let norms = c2.data();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    if norms[r] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        da[r * n + j] = dc[r] * ad[r * n + j] / norms[r];
                    }
                }
                store.add(&a, da);
            }));
        }
        Ok(c)
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy_logits(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (m, n) = logits.dims2("cross_entropy_logits")?;
        if labels.len() != m {
            return Err(MohError::Contract(format!(
                "cross_entropy_logits: {} rows but {} labels",
                m,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(MohError::Contract(format!(
                "cross_entropy_logits: label {} out of {} classes",
                bad, n
            )));
        }
        let mut probs = logits.data();
        raw::softmax_rows(&mut probs, n);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            loss -= probs[r * n + label].max(1e-300).ln();
        }
        loss /= m as f64;
        let c = Tensor::scalar(loss);
        if self.track(&[logits], &c) {
            let (logits, c2) = (logits.clone(), c.clone());
            let labels = labels.to_vec();
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2) else { return };
                let up = dc[0];
                let mut probs = logits.data();
                raw::softmax_rows(&mut probs, n);
                let mut da = vec![0.0; m * n];
                for (r, &label) in labels.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        da[r * n + j] = up * (probs[r * n + j] - onehot) / m as f64;
                    }
                }
                store.add(&logits, da);
            }));
        }
        Ok(c)
    }

    /// Straight-through quantizer: forward emits the 0/1 mask values, the
    /// backward pass hands the incoming gradient to `scores` unchanged.
    pub fn ste_mask(&self, scores: &Tensor, mask: &[f64]) -> Result<Tensor> {
        let shape = scores.shape();
        if mask.len() != scores.numel() {
            return Err(MohError::Contract(format!(
                "ste_mask: {} scores but {} mask entries",
                scores.numel(),
                mask.len()
            )));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(MohError::Contract("ste_mask: mask entries must be 0 or 1".into()));
        }
        let c = Tensor::from_vec(&shape, mask.to_vec())?;
        if self.track(&[scores], &c) {
            let (scores, c2) = (scores.clone(), c.clone());
            self.push(Box::new(move |store| {
                let Some(dc) = store.get(&c2).map(|g| g.to_vec()) else {
                    return;
                };
                store.add(&scores, dc);
            }));
        }
        Ok(c)
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`.
///
/// `f` must rebuild its graph from scratch on every call; the closure gets
/// a fresh tape plus the tensor to differentiate against.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(MohError::Contract("finite_diff_check: eps must be > 0".into()));
    }
    let shape = x.shape();
    let base = x.data();

    let tape = Tape::new();
    let var = Tensor::from_vec(&shape, base.clone())?.with_grad();
    let loss = f(&tape, &var)?;
    tape.backward(&loss)?;
    let analytic = var
        .grad()
        .ok_or_else(|| MohError::Contract("finite_diff_check: loss does not depend on x".into()))?;

    let eval = |data: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let t = Tensor::from_vec(&shape, data)?;
        Ok(f(&tape, &t)?.item())
    };

    let mut max_err = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), vec![11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::test_rng(7);
        let tape = Tape::new();
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = tape.matmul(&a, &b).unwrap();
        let (ad, bd, cd) = (a.data(), b.data(), c.data());
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += ad[i * 4 + k] * bd[k * 2 + j];
                }
                assert!((cd[i * 2 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax_lastdim(&x);
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3], vec![1000.0, 0.0, 0.0]).unwrap();
        let y = tape.softmax_lastdim(&x);
        let d = y.data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1] < 1e-12 && d[2] < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = tape.softmax_lastdim(&x);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (yi, xi) in y.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((yi - xi.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap().with_grad();
        let loss = tape.sum_all(&x);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_sum_of_squares_gives_2x() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, -2.0, 0.5]).unwrap().with_grad();
        let loss = tape.sum_all(&tape.mul(&x, &x).unwrap());
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 2]).with_grad();
        let y = tape.scale(&x, 2.0);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn backward_composite_matches_finite_differences() {
        let mut rng = crate::test_rng(3);
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng);
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.matmul(x, &w)?;
                let s = tape.softmax_lastdim(&y);
                Ok(tape.sum_all(&tape.mul(&s, &s)?))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn finite_diff_on_plain_sum_is_tiny() {
        let mut rng = crate::test_rng(4);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let err = finite_diff_check(|tape, x| Ok(tape.sum_all(x)), &x, 1e-5).unwrap();
        assert!(err < 1e-8);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap().with_grad();
        let loss = tape.sum_all(&x);
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut rng = crate::test_rng(11);
            let tape = Tape::new();
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng).with_grad();
            let w = Tensor::randn(&[4, 3], 1.0, &mut rng).with_grad();
            let y = tape.matmul(&x, &w).unwrap();
            let s = tape.softmax_lastdim(&y);
            let loss = tape.sum_all(&tape.mul(&s, &s).unwrap());
            tape.backward(&loss).unwrap();
            (x.grad().unwrap(), w.grad().unwrap())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ste_mask_passes_gradient_through() {
        let tape = Tape::new();
        let g = Tensor::from_vec(&[1, 2], vec![0.3, 0.9]).unwrap().with_grad();
        let q = tape.ste_mask(&g, &[0.0, 1.0]).unwrap();
        assert_eq!(q.data(), vec![0.0, 1.0]);
        let weights = Tensor::from_vec(&[1, 2], vec![0.7, 0.2]).unwrap();
        let loss = tape.sum_all(&tape.mul(&q, &weights).unwrap());
        tape.backward(&loss).unwrap();
        assert_eq!(g.grad().unwrap(), vec![0.7, 0.2]);
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_oracle_up_to_8x8(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000
        ) {
            let mut rng = crate::test_rng(seed);
            let tape = Tape::new();
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let c = tape.matmul(&a, &b).unwrap();
            let (ad, bd, cd) = (a.data(), b.data(), c.data());
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += ad[i * k + p] * bd[p * n + j];
                    }
                    prop_assert!((cd[i * n + j] - acc).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn softmax_is_a_simplex_point(
            n in 1usize..=8,
            scale in 0.0f64..1e3,
            seed in 0u64..1000
        ) {
            let mut rng = crate::test_rng(seed);
            let tape = Tape::new();
            let x = Tensor::randn(&[2, n], scale.max(1e-3), &mut rng);
            let y = tape.softmax_lastdim(&x);
            let d = y.data();
            for r in 0..2 {
                let row = &d[r * n..(r + 1) * n];
                prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn elementwise_grads_pass_finite_differences(seed in 0u64..200) {
            let mut rng = crate::test_rng(seed);
            let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
            let other = Tensor::randn(&[2, 3], 1.0, &mut rng);
            let err = finite_diff_check(
                |tape, x| {
                    let y = tape.mul(x, &other)?;
                    let z = tape.add(&y, x)?;
                    Ok(tape.sum_all(&tape.mul(&z, &z)?))
                },
                &x,
                1e-5,
            ).unwrap();
            prop_assert!(err < 1e-4);
        }
    }
}
