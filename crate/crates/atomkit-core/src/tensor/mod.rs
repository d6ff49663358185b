//! Dense f64 tensors with tape-free reverse-mode autodiff.
//!
//! Graph nodes are reference-counted; each non-leaf node stores its parents
//! and a backward closure. `backward()` on a scalar loss walks the graph in
//! reverse topological order. Everything is 64-bit: the gradient checks in
//! the test suite rely on it.

pub mod optim;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Op {
    parents: Vec<Tensor>,
    /// Accumulates parent gradients given (output, d_loss/d_output).
    backward: Box<dyn Fn(&Tensor, &[f64])>,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    /// Leaf parameter flag.
    requires_grad: bool,
    /// True if this node lies on a path to some requires_grad leaf.
    track: bool,
    op: Option<Op>,
}

/// Dense row-major tensor, cheap to clone (shared storage).
pub struct Tensor {
    inner: Rc<Inner>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn from_parts(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = requires_grad || op.is_some();
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                track,
                op,
            }),
        }
    }

    fn unary(&self, shape: Vec<usize>, data: Vec<f64>, backward: Box<dyn Fn(&Tensor, &[f64])>) -> Tensor {
        if self.inner.track {
            Tensor::from_parts(shape, data, false, Some(Op { parents: vec![self.clone()], backward }))
        } else {
            Tensor::from_parts(shape, data, false, None)
        }
    }

    fn binary(
        &self,
        other: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: Box<dyn Fn(&Tensor, &[f64])>,
    ) -> Tensor {
        if self.inner.track || other.inner.track {
            Tensor::from_parts(
                shape,
                data,
                false,
                Some(Op { parents: vec![self.clone(), other.clone()], backward }),
            )
        } else {
            Tensor::from_parts(shape, data, false, None)
        }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_parts(vec![], vec![v], false, None)
    }

    /// Leaf parameter participating in autodiff.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::ShapeMismatch(format!(
                "shape {:?} vs data length {}",
                shape,
                data.len()
            )));
        }
        Ok(Tensor::from_parts(shape.to_vec(), data, true, None))
    }

    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Tensor::from_parts(shape.to_vec(), data, false, None)
    }

    pub fn randn_param<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Tensor::param(shape, data).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrites the value buffer in place (used by the optimizer).
    pub fn set_data(&self, data: Vec<f64>) {
        assert_eq!(data.len(), self.numel(), "set_data length mismatch");
        *self.inner.data.borrow_mut() = data;
    }

    pub(crate) fn with_data_mut<T>(&self, f: impl FnOnce(&mut [f64]) -> T) -> T {
        f(&mut self.inner.data.borrow_mut())
    }

    pub(crate) fn with_grad_mut<T>(&self, f: impl FnOnce(&mut Option<Vec<f64>>) -> T) -> T {
        f(&mut self.inner.grad.borrow_mut())
    }

    /// Detached copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Tensor::from_parts(self.inner.shape.clone(), self.to_vec(), false, None)
    }

    fn accum_grad(&self, g: &[f64]) {
        if !self.inner.track {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, gi) in buf.iter_mut().zip(g) {
                    *b += gi;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    /// Reverse-mode pass from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are reset per call.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.inner.shape.clone()));
        }
        // Post-order DFS for reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((node, child_idx)) = stack.pop() {
            if child_idx == 0 {
                if !visited.insert(node.inner.id) {
                    continue;
                }
            }
            let n_parents = node.inner.op.as_ref().map_or(0, |op| op.parents.len());
            if child_idx < n_parents {
                let parent = node.inner.op.as_ref().unwrap().parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if !visited.contains(&parent.inner.id) && parent.inner.track {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        // Intermediates restart from zero every backward call.
        for node in &order {
            if !node.is_leaf() {
                *node.inner.grad.borrow_mut() = None;
            }
        }
        self.accum_grad(&[1.0]);
        for node in order.iter().rev() {
            if let Some(op) = &node.inner.op {
                let g = node.inner.grad.borrow().clone();
                if let Some(g) = g {
                    (op.backward)(node, &g);
                }
            }
        }
        Ok(())
    }

    // ── elementwise and broadcast ops ──────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        self.binary(other, self.inner.shape.clone(), data, Box::new(move |_, g| {
            pa.accum_grad(g);
            pb.accum_grad(g);
        }))
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        self.binary(other, self.inner.shape.clone(), data, Box::new(move |_, g| {
            pa.accum_grad(g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            pb.accum_grad(&neg);
        }))
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let data = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        self.binary(other, self.inner.shape.clone(), data, Box::new(move |_, g| {
            {
                let bv = pb.inner.data.borrow();
                let da: Vec<f64> = g.iter().zip(bv.iter()).map(|(gi, y)| gi * y).collect();
                drop(bv);
                pa.accum_grad(&da);
            }
            let av = pa.inner.data.borrow();
            let db: Vec<f64> = g.iter().zip(av.iter()).map(|(gi, x)| gi * x).collect();
            drop(av);
            pb.accum_grad(&db);
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.inner.data.borrow().iter().map(|x| x * c).collect();
        let pa = self.clone();
        self.unary(self.inner.shape.clone(), data, Box::new(move |_, g| {
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            pa.accum_grad(&da);
        }))
    }

    /// Gate: multiply by a scalar (0-d or 1-element) tensor, with gradient
    /// flowing to both the gate and the gated tensor.
    pub fn scale_by(&self, gate: &Tensor) -> Tensor {
        assert_eq!(gate.numel(), 1, "scale_by expects a scalar gate");
        let c = gate.item();
        let data = self.inner.data.borrow().iter().map(|x| x * c).collect();
        let (pa, pg) = (self.clone(), gate.clone());
        self.binary(gate, self.inner.shape.clone(), data, Box::new(move |_, g| {
            let c = pg.item();
            let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
            pa.accum_grad(&da);
            let av = pa.inner.data.borrow();
            let dg: f64 = g.iter().zip(av.iter()).map(|(gi, x)| gi * x).sum();
            drop(av);
            pg.accum_grad(&[dg]);
        }))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.inner.data.borrow().iter().map(|x| sigmoid(*x)).collect();
        let pa = self.clone();
        self.unary(self.inner.shape.clone(), data, Box::new(move |out, g| {
            let y = out.inner.data.borrow();
            let da: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
            drop(y);
            pa.accum_grad(&da);
        }))
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.inner.data.borrow().iter().sum();
        let pa = self.clone();
        let n = self.numel();
        self.unary(vec![], vec![s], Box::new(move |_, g| {
            pa.accum_grad(&vec![g[0]; n]);
        }))
    }

    // ── 2-d linear algebra ─────────────────────────────────────────────

    fn dims2(&self) -> (usize, usize) {
        match self.inner.shape.as_slice() {
            [r, c] => (*r, *c),
            s => panic!("expected 2-d tensor, got shape {s:?}"),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul inner dims: {m}x{k} @ {k2}x{n}"
            )));
        }
        let data = {
            let a = self.inner.data.borrow();
            let b = other.inner.data.borrow();
            matmul_raw(&a, m, k, &b, n)
        };
        let (pa, pb) = (self.clone(), other.clone());
        Ok(self.binary(other, vec![m, n], data, Box::new(move |_, g| {
            // dA = g @ B^T, dB = A^T @ g
            {
                let b = pb.inner.data.borrow();
                let bt = transpose_raw(&b, k, n);
                let da = matmul_raw(g, m, n, &bt, k);
                drop(b);
                pa.accum_grad(&da);
            }
            let a = pa.inner.data.borrow();
            let at = transpose_raw(&a, m, k);
            let db = matmul_raw(&at, k, m, g, n);
            drop(a);
            pb.accum_grad(&db);
        })))
    }

    pub fn t(&self) -> Tensor {
        let (m, n) = self.dims2();
        let data = transpose_raw(&self.inner.data.borrow(), m, n);
        let pa = self.clone();
        self.unary(vec![n, m], data, Box::new(move |_, g| {
            let da = transpose_raw(g, n, m);
            pa.accum_grad(&da);
        }))
    }

    /// Adds a 1-d bias to every row of a 2-d tensor.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(bias.shape(), [n], "add_row bias width mismatch");
        let data = {
            let a = self.inner.data.borrow();
            let b = bias.inner.data.borrow();
            let mut out = a.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += b[j];
                }
            }
            out
        };
        let (pa, pb) = (self.clone(), bias.clone());
        self.binary(bias, vec![m, n], data, Box::new(move |_, g| {
            pa.accum_grad(g);
            let mut db = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    db[j] += g[i * n + j];
                }
            }
            pb.accum_grad(&db);
        }))
    }

    /// Columns [lo, hi) of a 2-d tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor {
        let (m, n) = self.dims2();
        assert!(lo < hi && hi <= n, "slice_cols range out of bounds");
        let w = hi - lo;
        let data = {
            let a = self.inner.data.borrow();
            let mut out = Vec::with_capacity(m * w);
            for i in 0..m {
                out.extend_from_slice(&a[i * n + lo..i * n + hi]);
            }
            out
        };
        let pa = self.clone();
        self.unary(vec![m, w], data, Box::new(move |_, g| {
            let mut da = vec![0.0; m * n];
            for i in 0..m {
                da[i * n + lo..i * n + hi].copy_from_slice(&g[i * w..(i + 1) * w]);
            }
            pa.accum_grad(&da);
        }))
    }

    /// Horizontal concatenation of 2-d tensors with equal row counts.
    pub fn concat_cols(parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let m = parts[0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = p.dims2();
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        {
            let bufs: Vec<_> = parts.iter().map(|p| p.inner.data.borrow()).collect();
            for i in 0..m {
                for (p, w) in bufs.iter().zip(&widths) {
                    data.extend_from_slice(&p[i * w..(i + 1) * w]);
                }
            }
        }
        let track = parts.iter().any(|p| p.inner.track);
        if !track {
            return Tensor::from_parts(vec![m, total], data, false, None);
        }
        let owned: Vec<Tensor> = parts.to_vec();
        let widths_bk = widths.clone();
        let backward = Box::new(move |_: &Tensor, g: &[f64]| {
            let mut off = 0;
            for (p, w) in owned.iter().zip(&widths_bk) {
                let mut dp = vec![0.0; m * w];
                for i in 0..m {
                    dp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + off..i * total + off + w]);
                }
                p.accum_grad(&dp);
                off += w;
            }
        });
        Tensor::from_parts(vec![m, total], data, false, Some(Op { parents: parts.to_vec(), backward }))
    }

    /// Row lookup (embedding): out[i] = table[idx[i]].
    pub fn gather_rows(table: &Tensor, idx: &[usize]) -> Tensor {
        let (rows, width) = table.dims2();
        let data = {
            let t = table.inner.data.borrow();
            let mut out = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                assert!(i < rows, "gather_rows index {i} out of {rows}");
                out.extend_from_slice(&t[i * width..(i + 1) * width]);
            }
            out
        };
        let pt = table.clone();
        let idx_bk = idx.to_vec();
        table.unary(vec![idx.len(), width], data, Box::new(move |_, g| {
            let mut dt = vec![0.0; rows * width];
            for (r, &i) in idx_bk.iter().enumerate() {
                for j in 0..width {
                    dt[i * width + j] += g[r * width + j];
                }
            }
            pt.accum_grad(&dt);
        }))
    }

    // ── neural-net kernels ─────────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`; every slice sums to 1.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shape = self.inner.shape.clone();
        assert!(axis < shape.len(), "softmax axis out of range");
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(data[base + l * inner]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (data[base + l * inner] - max).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] /= sum;
                }
            }
        }
        let pa = self.clone();
        self.unary(shape, data, Box::new(move |out, g| {
            let y = out.inner.data.borrow();
            let mut da = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for l in 0..len {
                        let k = base + l * inner;
                        dot += g[k] * y[k];
                    }
                    for l in 0..len {
                        let k = base + l * inner;
                        da[k] = y[k] * (g[k] - dot);
                    }
                }
            }
            drop(y);
            pa.accum_grad(&da);
        }))
    }

    /// RMS normalization over the last axis with a learned gain.
    pub fn rms_norm(&self, gain: &Tensor, eps: f64) -> Tensor {
        let shape = self.inner.shape.clone();
        let d = *shape.last().expect("rms_norm needs rank >= 1");
        assert_eq!(gain.shape(), [d], "rms_norm gain width mismatch");
        let rows = self.numel() / d;
        let data = {
            let x = self.inner.data.borrow();
            let gn = gain.inner.data.borrow();
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                for j in 0..d {
                    out[r * d + j] = row[j] * inv * gn[j];
                }
            }
            out
        };
        let (px, pg) = (self.clone(), gain.clone());
        self.binary(gain, shape, data, Box::new(move |_, g| {
            let x = px.inner.data.borrow();
            let gn = pg.inner.data.borrow();
            let mut dx = vec![0.0; x.len()];
            let mut dgain = vec![0.0; d];
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let rrms = (ms + eps).sqrt();
                let grow = &g[r * d..(r + 1) * d];
                let s: f64 = (0..d).map(|j| grow[j] * gn[j] * row[j]).sum();
                for j in 0..d {
                    dx[r * d + j] = grow[j] * gn[j] / rrms - row[j] * s / (d as f64 * rrms.powi(3));
                    dgain[j] += grow[j] * row[j] / rrms;
                }
            }
            drop(x);
            drop(gn);
            px.accum_grad(&dx);
            pg.accum_grad(&dgain);
        }))
    }

    /// Gated SiLU: split the last axis into (a, b), return a * b * sigmoid(b).
    pub fn swiglu(&self) -> Result<Tensor, TensorError> {
        let shape = self.inner.shape.clone();
        let last = *shape.last().expect("swiglu needs rank >= 1");
        if last % 2 != 0 {
            return Err(TensorError::ShapeMismatch(format!(
                "swiglu needs an even last dimension, got {last}"
            )));
        }
        let d = last / 2;
        let rows = self.numel() / last;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d;
        let data = {
            let x = self.inner.data.borrow();
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                for j in 0..d {
                    let a = x[r * last + j];
                    let b = x[r * last + d + j];
                    out[r * d + j] = a * b * sigmoid(b);
                }
            }
            out
        };
        let px = self.clone();
        Ok(self.unary(out_shape, data, Box::new(move |_, g| {
            let x = px.inner.data.borrow();
            let mut dx = vec![0.0; x.len()];
            for r in 0..rows {
                for j in 0..d {
                    let a = x[r * last + j];
                    let b = x[r * last + d + j];
                    let s = sigmoid(b);
                    let gi = g[r * d + j];
                    dx[r * last + j] = gi * b * s;
                    dx[r * last + d + j] = gi * a * s * (1.0 + b * (1.0 - s));
                }
            }
            drop(x);
            px.accum_grad(&dx);
        })))
    }

    /// Pairwise rotations: row i, pair k gets angle tables cos[i][k], sin[i][k].
    /// Orthogonal map, so the backward pass rotates by the negated angles.
    pub fn apply_rotations(&self, cos: &[f64], sin: &[f64]) -> Tensor {
        let (m, n) = self.dims2();
        assert_eq!(n % 2, 0, "apply_rotations needs even width");
        let half = n / 2;
        assert_eq!(cos.len(), m * half, "rotation table shape mismatch");
        assert_eq!(sin.len(), m * half, "rotation table shape mismatch");
        let data = {
            let x = self.inner.data.borrow();
            let mut out = vec![0.0; x.len()];
            for i in 0..m {
                for k in 0..half {
                    let (c, s) = (cos[i * half + k], sin[i * half + k]);
                    let x0 = x[i * n + 2 * k];
                    let x1 = x[i * n + 2 * k + 1];
                    out[i * n + 2 * k] = x0 * c - x1 * s;
                    out[i * n + 2 * k + 1] = x0 * s + x1 * c;
                }
            }
            out
        };
        let px = self.clone();
        let (cos_bk, sin_bk) = (cos.to_vec(), sin.to_vec());
        self.unary(vec![m, n], data, Box::new(move |_, g| {
            let mut dx = vec![0.0; g.len()];
            for i in 0..m {
                for k in 0..half {
                    let (c, s) = (cos_bk[i * half + k], sin_bk[i * half + k]);
                    let g0 = g[i * n + 2 * k];
                    let g1 = g[i * n + 2 * k + 1];
                    dx[i * n + 2 * k] = g0 * c + g1 * s;
                    dx[i * n + 2 * k + 1] = -g0 * s + g1 * c;
                }
            }
            px.accum_grad(&dx);
        }))
    }

    /// Vertically repeats a 2-d tensor `times` times. Backward sums the
    /// repeated blocks.
    pub fn tile_rows(&self, times: usize) -> Tensor {
        assert!(times >= 1);
        let (m, n) = self.dims2();
        let src = self.to_vec();
        let mut data = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            data.extend_from_slice(&src);
        }
        let px = self.clone();
        self.unary(vec![m * times, n], data, Box::new(move |_, g| {
            let mut da = vec![0.0; m * n];
            for t in 0..times {
                for i in 0..m * n {
                    da[i] += g[t * m * n + i];
                }
            }
            px.accum_grad(&da);
        }))
    }

    /// Inverted dropout; identity when not training or p == 0.
    pub fn dropout<R: Rng>(&self, p: f64, training: bool, rng: &mut R) -> Tensor {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if !training || p == 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = self
            .inner
            .data
            .borrow()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let px = self.clone();
        self.unary(self.inner.shape.clone(), data, Box::new(move |_, g| {
            let da: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
            px.accum_grad(&da);
        }))
    }

    /// Mean squared deviation: sum((a-b)^2) / divisor.
    pub fn scaled_sq_error(&self, target: &Tensor, divisor: f64) -> Tensor {
        let d = self.sub(target);
        d.mul(&d).sum().scale(1.0 / divisor)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
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
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
