//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The kernel set is deliberately small: enough to run toy transformer
//! encoders and the delta formulas spliced into them. Everything is 64-bit
//! and define-by-run: each operation allocates its output and, when any
//! input participates in differentiation, records a graph node holding the
//! input handles and a backward rule. `Tensor::backward` walks that graph
//! in reverse topological order.

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradNode {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<f64>>>,
    node: Option<GradNode>,
}

/// Shared handle to a tensor. Cloning shares storage and gradient state.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, node: Option<GradNode>) -> Tensor {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(false),
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {:?} implies {} elements, got {}", shape, numel_of(&shape), data.len()),
            ));
        }
        Ok(Self::build(shape, data, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(shape.to_vec(), vec![0.0; numel_of(shape)], None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Self::build(shape.to_vec(), vec![value; numel_of(shape)], None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::build(vec![], vec![value], None)
    }

    /// Leaf tensor marked trainable.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let t = Self::new(shape, data)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, flag: bool) {
        self.inner.requires_grad.set(flag);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// True when this tensor either accumulates gradient itself or sits on a
    /// recorded path to something that does.
    pub fn needs_grad(&self) -> bool {
        self.inner.requires_grad.get() || self.inner.node.is_some()
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn accumulate_grad(&self, incoming: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, inc) in buf.iter_mut().zip(incoming) {
                    *g += inc;
                }
            }
            None => *slot = Some(incoming.to_vec()),
        }
    }

    /// Propagates gradients from a scalar loss to every reachable tensor with
    /// `requires_grad == true`. Accumulation is additive across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        let tape = GradTape::trace(self);
        let mut flowing: HashMap<u64, Vec<f64>> = HashMap::new();
        flowing.insert(self.id(), vec![1.0]);
        for t in tape.order.iter().rev() {
            let Some(out_grad) = flowing.remove(&t.id()) else {
                continue;
            };
            if t.requires_grad() {
                t.accumulate_grad(&out_grad);
            }
            if let Some(node) = &t.inner.node {
                let contribs = (node.backward)(&out_grad);
                debug_assert_eq!(contribs.len(), node.inputs.len());
                for (input, contrib) in node.inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        debug_assert_eq!(c.len(), input.numel());
                        match flowing.get_mut(&input.id()) {
                            Some(buf) => {
                                for (g, inc) in buf.iter_mut().zip(&c) {
                                    *g += inc;
                                }
                            }
                            None => {
                                flowing.insert(input.id(), c);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the differentiable operations reaching a
/// given output: every operation appears after all producers of its inputs.
pub struct GradTape {
    order: Vec<Tensor>,
}

impl GradTape {
    pub fn trace(output: &Tensor) -> GradTape {
        enum Step {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![Step::Enter(output.clone())];
        while let Some(step) = stack.pop() {
            match step {
                Step::Enter(t) => {
                    if !seen.insert(t.id()) {
                        continue;
                    }
                    stack.push(Step::Exit(t.clone()));
                    if let Some(node) = &t.inner.node {
                        for input in &node.inputs {
                            stack.push(Step::Enter(input.clone()));
                        }
                    }
                }
                Step::Exit(t) => order.push(t),
            }
        }
        GradTape { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Positions of tensors in the recorded order, for invariant checks.
    pub fn positions(&self) -> HashMap<u64, usize> {
        self.order
            .iter()
            .enumerate()
            .map(|(i, t)| (t.id(), i))
            .collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.order
    }

    pub fn input_ids_of(&self, t: &Tensor) -> Vec<u64> {
        t.inner
            .node
            .as_ref()
            .map(|n| n.inputs.iter().map(Tensor::id).collect())
            .unwrap_or_default()
    }
}

fn record(shape: Vec<usize>, data: Vec<f64>, inputs: Vec<Tensor>, backward: BackwardFn) -> Tensor {
    if inputs.iter().any(Tensor::needs_grad) {
        Tensor::build(shape, data, Some(GradNode { inputs, backward }))
    } else {
        Tensor::build(shape, data, None)
    }
}

// ── raw kernels ──────────────────────────────────────────────────────

/// Plain m×k by k×n product on flat row-major slices.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn transpose_flat(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn is_suffix(suffix: &[usize], of: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}

// ── operations ───────────────────────────────────────────────────────

impl Tensor {
    /// `a[.., m, k] × b[k, n]`; `b` broadcasts over `a`'s leading axes.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let ashape = self.shape();
        let bshape = b.shape();
        if ashape.len() < 2 || bshape.len() != 2 || ashape[ashape.len() - 1] != bshape[0] {
            return Err(shape_err(
                "matmul",
                format!("{ashape:?} x {bshape:?}"),
            ));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[1];
        let leading = &ashape[..ashape.len() - 2];
        let batch = numel_of(leading);
        let adata = self.data();
        let bdata = b.data();
        let mut out = Vec::with_capacity(batch * m * n);
        for blk in 0..batch {
            out.extend(mm(&adata[blk * m * k..(blk + 1) * m * k], &bdata, m, k, n));
        }
        drop(adata);
        drop(bdata);
        let mut out_shape = leading.to_vec();
        out_shape.extend([m, n]);
        let (a_in, b_in) = (self.clone(), b.clone());
        Ok(record(
            out_shape,
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |dc| {
                let adata = a_in.data();
                let bdata = b_in.data();
                let da = a_in.needs_grad().then(|| {
                    let bt = transpose_flat(&bdata, k, n);
                    let mut da = Vec::with_capacity(batch * m * k);
                    for blk in 0..batch {
                        da.extend(mm(&dc[blk * m * n..(blk + 1) * m * n], &bt, m, n, k));
                    }
                    da
                });
                let db = b_in.needs_grad().then(|| {
                    let mut db = vec![0.0; k * n];
                    for blk in 0..batch {
                        let at = transpose_flat(&adata[blk * m * k..(blk + 1) * m * k], m, k);
                        let part = mm(&at, &dc[blk * m * n..(blk + 1) * m * n], k, m, n);
                        for (acc, p) in db.iter_mut().zip(part) {
                            *acc += p;
                        }
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Batched product: both operands carry identical leading axes.
    pub fn bmm(&self, b: &Tensor) -> Result<Tensor> {
        let ashape = self.shape();
        let bshape = b.shape();
        let ok = ashape.len() >= 2
            && ashape.len() == bshape.len()
            && ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2]
            && ashape[ashape.len() - 1] == bshape[bshape.len() - 2];
        if !ok {
            return Err(shape_err("bmm", format!("{ashape:?} x {bshape:?}")));
        }
        let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let n = bshape[bshape.len() - 1];
        let leading = &ashape[..ashape.len() - 2];
        let batch = numel_of(leading);
        let adata = self.data();
        let bdata = b.data();
        let mut out = Vec::with_capacity(batch * m * n);
        for blk in 0..batch {
            out.extend(mm(
                &adata[blk * m * k..(blk + 1) * m * k],
                &bdata[blk * k * n..(blk + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        drop(adata);
        drop(bdata);
        let mut out_shape = leading.to_vec();
        out_shape.extend([m, n]);
        let (a_in, b_in) = (self.clone(), b.clone());
        Ok(record(
            out_shape,
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |dc| {
                let adata = a_in.data();
                let bdata = b_in.data();
                let da = a_in.needs_grad().then(|| {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for blk in 0..batch {
                        let bt = transpose_flat(&bdata[blk * k * n..(blk + 1) * k * n], k, n);
                        da.extend(mm(&dc[blk * m * n..(blk + 1) * m * n], &bt, m, n, k));
                    }
                    da
                });
                let db = b_in.needs_grad().then(|| {
                    let mut db = Vec::with_capacity(batch * k * n);
                    for blk in 0..batch {
                        let at = transpose_flat(&adata[blk * m * k..(blk + 1) * m * k], m, k);
                        db.extend(mm(&at, &dc[blk * m * n..(blk + 1) * m * n], k, m, n));
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Elementwise sum; `b` may be a trailing suffix of `a`'s shape and is
    /// then tiled over the leading axes. The broadcast input's gradient is
    /// summed over those axes.
    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        if !is_suffix(b.shape(), self.shape()) {
            return Err(shape_err(
                "add",
                format!("{:?} + {:?}", self.shape(), b.shape()),
            ));
        }
        let bn = b.numel().max(1);
        let adata = self.data();
        let bdata = b.data();
        let out: Vec<f64> = adata
            .iter()
            .enumerate()
            .map(|(i, av)| av + bdata[i % bn])
            .collect();
        drop(adata);
        drop(bdata);
        let (a_in, b_in) = (self.clone(), b.clone());
        let total = self.numel();
        Ok(record(
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |dc| {
                let da = a_in.needs_grad().then(|| dc.to_vec());
                let db = b_in.needs_grad().then(|| {
                    if bn == total {
                        dc.to_vec()
                    } else {
                        let mut db = vec![0.0; bn];
                        for (i, g) in dc.iter().enumerate() {
                            db[i % bn] += g;
                        }
                        db
                    }
                });
                vec![da, db]
            }),
        ))
    }

    /// Rows of `self` followed by rows of `b` along the second-to-last axis.
    pub fn concat_rows(&self, b: &Tensor) -> Result<Tensor> {
        let ashape = self.shape();
        let bshape = b.shape();
        let ok = ashape.len() >= 2
            && ashape.len() == bshape.len()
            && ashape[..ashape.len() - 2] == bshape[..bshape.len() - 2]
            && ashape[ashape.len() - 1] == bshape[bshape.len() - 1];
        if !ok {
            return Err(shape_err(
                "concat_rows",
                format!("{ashape:?} ++ {bshape:?}"),
            ));
        }
        let d = ashape[ashape.len() - 1];
        let p = ashape[ashape.len() - 2];
        let s = bshape[bshape.len() - 2];
        let batch = numel_of(&ashape[..ashape.len() - 2]);
        let adata = self.data();
        let bdata = b.data();
        let mut out = Vec::with_capacity(batch * (p + s) * d);
        for blk in 0..batch {
            out.extend_from_slice(&adata[blk * p * d..(blk + 1) * p * d]);
            out.extend_from_slice(&bdata[blk * s * d..(blk + 1) * s * d]);
        }
        drop(adata);
        drop(bdata);
        let mut out_shape = ashape[..ashape.len() - 2].to_vec();
        out_shape.extend([p + s, d]);
        let (a_in, b_in) = (self.clone(), b.clone());
        Ok(record(
            out_shape,
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |dc| {
                let rows = p + s;
                let da = a_in.needs_grad().then(|| {
                    let mut da = Vec::with_capacity(batch * p * d);
                    for blk in 0..batch {
                        let base = blk * rows * d;
                        da.extend_from_slice(&dc[base..base + p * d]);
                    }
                    da
                });
                let db = b_in.needs_grad().then(|| {
                    let mut db = Vec::with_capacity(batch * s * d);
                    for blk in 0..batch {
                        let base = blk * rows * d + p * d;
                        db.extend_from_slice(&dc[base..base + s * d]);
                    }
                    db
                });
                vec![da, db]
            }),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape.last().ok_or_else(|| {
            shape_err("softmax", "scalar input has no last axis".into())
        })?;
        if d == 0 {
            return Err(shape_err("softmax", format!("empty last axis in {shape:?}")));
        }
        let data = self.data();
        let rows = data.len() / d;
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                out[r * d + j] = e;
                sum += e;
            }
            for j in 0..d {
                out[r * d + j] /= sum;
            }
        }
        drop(data);
        let y = out.clone();
        let a_in = self.clone();
        Ok(record(
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let mut dx = vec![0.0; dc.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let dot: f64 = (0..d).map(|j| dc[base + j] * y[base + j]).sum();
                        for j in 0..d {
                            dx[base + j] = y[base + j] * (dc[base + j] - dot);
                        }
                    }
                    dx
                });
                vec![dx]
            }),
        ))
    }

    /// Per-row standardization over the last axis (population variance plus
    /// `eps`), then affine gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    shape,
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let data = self.data();
        let g = gain.data();
        let b = bias.data();
        let rows = data.len() / d;
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        drop(data);
        drop(g);
        drop(b);
        let (x_in, g_in, b_in) = (self.clone(), gain.clone(), bias.clone());
        Ok(record(
            shape.to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |dc| {
                let g = g_in.data();
                let dx = x_in.needs_grad().then(|| {
                    let mut dx = vec![0.0; dc.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = dc[base + j] * g[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[base + j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = dc[base + j] * g[j];
                            dx[base + j] =
                                (dxh - mean_dxh - xhat[base + j] * mean_dxh_xh) * inv_std[r];
                        }
                    }
                    dx
                });
                let dg = g_in.needs_grad().then(|| {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += dc[r * d + j] * xhat[r * d + j];
                        }
                    }
                    dg
                });
                let db = b_in.needs_grad().then(|| {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += dc[r * d + j];
                        }
                    }
                    db
                });
                vec![dx, dg, db]
            }),
        ))
    }

    pub fn relu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x.max(0.0)).collect();
        let a_in = self.clone();
        record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let data = a_in.data();
                    dc.iter()
                        .zip(data.iter())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect()
                });
                vec![dx]
            }),
        )
    }

    /// Gaussian error linear unit, tanh approximation with fixed constants.
    pub fn gelu(&self) -> Tensor {
        const S: f64 = 0.7978845608;
        const C: f64 = 0.044715;
        let out: Vec<f64> = self
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (S * (x + C * x * x * x)).tanh()))
            .collect();
        let a_in = self.clone();
        record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let data = a_in.data();
                    dc.iter()
                        .zip(data.iter())
                        .map(|(g, &x)| {
                            let t = (S * (x + C * x * x * x)).tanh();
                            let du = S * (1.0 + 3.0 * C * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect()
                });
                vec![dx]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x.tanh()).collect();
        let y = out.clone();
        let a_in = self.clone();
        record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    dc.iter()
                        .zip(y.iter())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect()
                });
                vec![dx]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let a_in = self.clone();
        record(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in
                    .needs_grad()
                    .then(|| dc.iter().map(|g| g * c).collect());
                vec![dx]
            }),
        )
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        if self.shape() != b.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} * {:?}", self.shape(), b.shape()),
            ));
        }
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x * y)
            .collect();
        let (a_in, b_in) = (self.clone(), b.clone());
        Ok(record(
            self.shape().to_vec(),
            out,
            vec![self.clone(), b.clone()],
            Box::new(move |dc| {
                let da = a_in.needs_grad().then(|| {
                    let bd = b_in.data();
                    dc.iter().zip(bd.iter()).map(|(g, y)| g * y).collect()
                });
                let db = b_in.needs_grad().then(|| {
                    let ad = a_in.data();
                    dc.iter().zip(ad.iter()).map(|(g, x)| g * x).collect()
                });
                vec![da, db]
            }),
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        let a_in = self.clone();
        record(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| vec![dc[0]; n]);
                vec![dx]
            }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(shape_err("transpose_last2", format!("{shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel_of(&shape[..shape.len() - 2]);
        let data = self.data();
        let mut out = Vec::with_capacity(data.len());
        for blk in 0..batch {
            out.extend(transpose_flat(&data[blk * r * c..(blk + 1) * r * c], r, c));
        }
        drop(data);
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([c, r]);
        let a_in = self.clone();
        Ok(record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let mut dx = Vec::with_capacity(dc.len());
                    for blk in 0..batch {
                        dx.extend(transpose_flat(&dc[blk * r * c..(blk + 1) * r * c], c, r));
                    }
                    dx
                });
                vec![dx]
            }),
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| shape_err("slice_last", "scalar input".into()))?;
        if start + len > d {
            return Err(shape_err(
                "slice_last",
                format!("[{start}, {}) out of {d} columns", start + len),
            ));
        }
        let data = self.data();
        let rows = data.len() / d;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&data[r * d + start..r * d + start + len]);
        }
        drop(data);
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let a_in = self.clone();
        Ok(record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let mut dx = vec![0.0; rows * d];
                    for r in 0..rows {
                        dx[r * d + start..r * d + start + len]
                            .copy_from_slice(&dc[r * len..(r + 1) * len]);
                    }
                    dx
                });
                vec![dx]
            }),
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_last", "no operands".into()))?;
        let lead = &first.shape()[..first.ndim() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            if p.ndim() == 0 || &p.shape()[..p.ndim() - 1] != lead {
                return Err(shape_err(
                    "concat_last",
                    format!("{:?} vs {:?}", p.shape(), first.shape()),
                ));
            }
            widths.push(*p.shape().last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel_of(lead);
        let mut out = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (w, d) in widths.iter().zip(&datas) {
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        let mut out_shape = lead.to_vec();
        out_shape.push(total);
        let inputs: Vec<Tensor> = parts.to_vec();
        let ins = inputs.clone();
        Ok(record(
            out_shape,
            out,
            inputs,
            Box::new(move |dc| {
                let mut offsets = Vec::with_capacity(ins.len());
                let mut off = 0;
                for w in &widths {
                    offsets.push(off);
                    off += w;
                }
                ins.iter()
                    .enumerate()
                    .map(|(i, input)| {
                        input.needs_grad().then(|| {
                            let w = widths[i];
                            let mut dx = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                let base = r * total + offsets[i];
                                dx.extend_from_slice(&dc[base..base + w]);
                            }
                            dx
                        })
                    })
                    .collect()
            }),
        ))
    }

    /// Picks one row of the second-to-last axis: `[.., S, d] -> [.., d]`.
    pub fn take_row(&self, pos: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(shape_err("take_row", format!("{shape:?}")));
        }
        let d = shape[shape.len() - 1];
        let s = shape[shape.len() - 2];
        if pos >= s {
            return Err(Error::Index {
                op: "take_row",
                value: pos,
                bound: s,
            });
        }
        let batch = numel_of(&shape[..shape.len() - 2]);
        let data = self.data();
        let mut out = Vec::with_capacity(batch * d);
        for blk in 0..batch {
            let base = blk * s * d + pos * d;
            out.extend_from_slice(&data[base..base + d]);
        }
        drop(data);
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.push(d);
        let a_in = self.clone();
        Ok(record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let mut dx = vec![0.0; batch * s * d];
                    for blk in 0..batch {
                        let base = blk * s * d + pos * d;
                        dx[base..base + d].copy_from_slice(&dc[blk * d..(blk + 1) * d]);
                    }
                    dx
                });
                vec![dx]
            }),
        ))
    }

    /// Tiles the tensor over new leading axes; gradient sums over the tiles.
    pub fn expand_leading(&self, leading: &[usize]) -> Tensor {
        let reps = numel_of(leading);
        let data = self.data();
        let mut out = Vec::with_capacity(reps * data.len());
        for _ in 0..reps {
            out.extend_from_slice(&data);
        }
        let n = data.len();
        drop(data);
        let mut out_shape = leading.to_vec();
        out_shape.extend_from_slice(self.shape());
        let a_in = self.clone();
        record(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |dc| {
                let dx = a_in.needs_grad().then(|| {
                    let mut dx = vec![0.0; n];
                    for (i, g) in dc.iter().enumerate() {
                        dx[i % n] += g;
                    }
                    dx
                });
                vec![dx]
            }),
        )
    }
}

/// Gathers rows of `table[vocab, d]` at `ids`; output shape is
/// `leading ++ [d]` with `numel(leading) == ids.len()`.
pub fn embedding_lookup(table: &Tensor, ids: &[usize], leading: &[usize]) -> Result<Tensor> {
    if table.ndim() != 2 {
        return Err(shape_err(
            "embedding_lookup",
            format!("table must be 2-d, got {:?}", table.shape()),
        ));
    }
    if numel_of(leading) != ids.len() {
        return Err(shape_err(
            "embedding_lookup",
            format!("{} ids for leading shape {leading:?}", ids.len()),
        ));
    }
    let vocab = table.shape()[0];
    let d = table.shape()[1];
    let data = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::Index {
                op: "embedding_lookup",
                value: id,
                bound: vocab,
            });
        }
        out.extend_from_slice(&data[id * d..(id + 1) * d]);
    }
    drop(data);
    let mut out_shape = leading.to_vec();
    out_shape.push(d);
    let table_in = table.clone();
    let ids_own: Vec<usize> = ids.to_vec();
    Ok(record(
        out_shape,
        out,
        vec![table.clone()],
        Box::new(move |dc| {
            let dt = table_in.needs_grad().then(|| {
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in ids_own.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += dc[row * d + j];
                    }
                }
                dt
            });
            vec![dt]
        }),
    ))
}

/// Mean negative log-likelihood of `labels` under row-softmax of
/// `logits[batch, classes]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(shape_err(
            "cross_entropy",
            format!("logits must be 2-d, got {:?}", logits.shape()),
        ));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(shape_err(
            "cross_entropy",
            format!("{} labels for batch {batch}", labels.len()),
        ));
    }
    let data = logits.data();
    let mut probs = vec![0.0; batch * classes];
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Index {
                op: "cross_entropy",
                value: label,
                bound: classes,
            });
        }
        let row = &data[r * classes..(r + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, x) in row.iter().enumerate() {
            let e = (x - max).exp();
            probs[r * classes + j] = e;
            sum += e;
        }
        for j in 0..classes {
            probs[r * classes + j] /= sum;
        }
        loss -= probs[r * classes + label].ln();
    }
    loss /= batch as f64;
    drop(data);
    let logits_in = logits.clone();
    let labels_own = labels.to_vec();
    Ok(record(
        vec![],
        vec![loss],
        vec![logits.clone()],
        Box::new(move |dc| {
            let dl = logits_in.needs_grad().then(|| {
                let scale = dc[0] / batch as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &label) in labels_own.iter().enumerate() {
                    dl[r * classes + label] -= scale;
                }
                dl
            });
            vec![dl]
        }),
    ))
}
