//! Tape-based reverse-mode differentiation over a closed set of dense tensor
//! ops, plus a named parameter store, Adam and checkpoint I/O.
//!
//! Every op takes and returns [`Var`] handles into a [`Graph`]. Binary
//! elementwise ops broadcast numpy-style (right-aligned, size-1 axes
//! stretch); their gradients are summed back over the stretched axes.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, ArrayD, ArrayViewD, Axis, IxDyn, Zip};

use crate::error::{Error, Result};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Reshape(Var),
    BroadcastTo(Var),
    Sum(Var),
    Mean(Var, Vec<usize>),
    Max(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Diag(Var, usize),
    Relu(Var),
    Prelu(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var, usize),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Array1<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Batch statistics produced by a training-mode batch norm, to be folded
/// into the running averages once the step completes.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub mean_id: usize,
    pub var_id: usize,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// A single-use tape.
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
    grad_enabled: bool,
    pub(crate) bn_updates: Vec<BnUpdate>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_keep(x: &Tensor, axes: &[usize], f: impl Fn(ArrayViewD<f64>, Axis) -> Tensor) -> Tensor {
    let mut out: Option<Tensor> = None;
    for &a in axes {
        let v = match &out {
            Some(t) => f(t.view(), Axis(a)),
            None => f(x.view(), Axis(a)),
        };
        out = Some(v.insert_axis(Axis(a)));
    }
    out.unwrap_or_else(|| x.clone())
}

/// Elementwise `f(x, y)` over the broadcast `shape`, walking both operands
/// by stride with a contiguous inner loop over the output's last axis.
fn broadcast_map(x: ArrayViewD<f64>, y: ArrayViewD<f64>, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let xb = x.broadcast(IxDyn(shape)).unwrap();
    let yb = y.broadcast(IxDyn(shape)).unwrap();
    let len: usize = shape.iter().product();
    if len == 0 || shape.is_empty() {
        return Zip::from(&xb).and(&yb).map_collect(|&p, &q| f(p, q));
    }
    if let (Some(xs), Some(ys)) = (xb.as_slice(), yb.as_slice()) {
        let v: Vec<f64> = xs.iter().zip(ys).map(|(&p, &q)| f(p, q)).collect();
        return ArrayD::from_shape_vec(IxDyn(shape), v).unwrap();
    }
    let (sx, sy) = (xb.strides().to_vec(), yb.strides().to_vec());
    let (px, py) = (xb.as_ptr(), yb.as_ptr());
    let nd = shape.len();
    let inner = shape[nd - 1];
    let (ix, iy) = (sx[nd - 1], sy[nd - 1]);
    let mut out = Vec::with_capacity(len);
    let mut idx = vec![0usize; nd - 1];
    let (mut ox, mut oy) = (0isize, 0isize);
    loop {
        // SAFETY: offsets are built from the broadcast views' own strides and
        // stay within their index ranges, so every read is in bounds.
        unsafe {
            for j in 0..inner as isize {
                out.push(f(*px.offset(ox + j * ix), *py.offset(oy + j * iy)));
            }
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
            }
            d -= 1;
            idx[d] += 1;
            ox += sx[d];
            oy += sy[d];
            if idx[d] < shape[d] {
                break;
            }
            ox -= sx[d] * shape[d] as isize;
            oy -= sy[d] * shape[d] as isize;
            idx[d] = 0;
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Sums `g` down to `shape` over the axes that broadcasting stretched.
fn reduce_to(g: Tensor, shape: &[usize]) -> Tensor {
    let mut g = g;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn to_2d(x: &Tensor) -> Array2<f64> {
    to_2d_view(x).into_owned()
}

/// Rows-by-features view, copying only when `x` is not in standard layout.
fn to_2d_view(x: &Tensor) -> ndarray::CowArray<'_, f64, ndarray::Ix2> {
    let f = *x.shape().last().unwrap_or(&1);
    let m = if f == 0 { 0 } else { x.len() / f };
    match x.view().into_shape_with_order((m, f)) {
        Ok(v) => v.into(),
        Err(_) => x.as_standard_layout().into_owned().into_shape_with_order((m, f)).expect("contiguous reshape").into(),
    }
}

fn from_2d(x: Array2<f64>, shape: &[usize]) -> Tensor {
    let x = if x.is_standard_layout() { x } else { x.as_standard_layout().into_owned() };
    x.into_shape_with_order(IxDyn(shape)).expect("shape preserved")
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), grad_enabled: true, bn_updates: Vec::new() }
    }

    /// A tape that records values only; `backward` is unavailable.
    pub fn no_grad() -> Self {
        Graph { grad_enabled: false, ..Self::new() }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[1]), x))
    }

    /// Loads parameter `id` of `store` as a leaf whose gradient is collected.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.params.push((v, id));
        v
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        let shape = broadcast_shape(x.shape(), y.shape())?;
        Ok(broadcast_map(x.view(), y.view(), &shape, f))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x[..., F] @ w[F, F_O]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape(format!("matmul {xs:?} by {ws:?}")));
        }
        let w2 = self.value(w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let y = to_2d_view(self.value(x)).dot(&w2);
        let mut out = xs;
        *out.last_mut().unwrap() = ws[1];
        let v = from_2d(y, &out);
        Ok(self.push(v, Op::MatMul(x, w)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("reshape {:?} to {shape:?}", t.shape())));
        }
        let v = if t.is_standard_layout() {
            ArrayD::from_shape_vec(IxDyn(shape), t.iter().copied().collect()).unwrap()
        } else {
            t.as_standard_layout().into_owned().into_shape_with_order(IxDyn(shape)).unwrap()
        };
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self
            .value(x)
            .broadcast(IxDyn(shape))
            .ok_or_else(|| Error::shape(format!("broadcast {:?} to {shape:?}", self.shape(x))))?
            .to_owned();
        Ok(self.push(v, Op::BroadcastTo(x)))
    }

    fn check_axes(&self, x: Var, axes: &[usize]) -> Result<()> {
        let n = self.shape(x).len();
        if axes.iter().any(|&a| a >= n) {
            return Err(Error::shape(format!("axes {axes:?} out of range for rank {n}")));
        }
        Ok(())
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let v = reduce_keep(self.value(x), axes, |t, a| t.sum_axis(a));
        Ok(self.push(v, Op::Sum(x)))
    }

    /// Mean over `axes`, keeping them as size-1 dims.
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let n: usize = axes.iter().map(|&a| self.shape(x)[a]).product();
        let v = reduce_keep(self.value(x), axes, |t, a| t.sum_axis(a)).mapv(|s| s / n as f64);
        Ok(self.push(v, Op::Mean(x, axes.to_vec())))
    }

    /// Max over `axes`, keeping them as size-1 dims. Ties share the gradient.
    pub fn max(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_axes(x, axes)?;
        let v = reduce_keep(self.value(x), axes, |t, a| t.fold_axis(a, f64::NEG_INFINITY, |m, &y| m.max(y)));
        Ok(self.push(v, Op::Max(x, axes.to_vec())))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = xs.iter().map(|&v| self.value(v).view()).collect();
        let v = concatenate(Axis(axis), &views).map_err(|e| Error::shape(format!("concat: {e}")))?;
        Ok(self.push(v, Op::Concat(xs.to_vec(), axis)))
    }

    /// Diagonal over axes `(axis, axis+1)`, which must have equal length;
    /// the result drops `axis + 1`.
    pub fn diag(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.ndim() < axis + 2 || t.shape()[axis] != t.shape()[axis + 1] {
            return Err(Error::shape(format!("diag over axes {axis},{} of {:?}", axis + 1, t.shape())));
        }
        let k = t.shape()[axis];
        let slices: Vec<_> = (0..k)
            .map(|i| t.index_axis(Axis(axis + 1), i).index_axis(Axis(axis), i).insert_axis(Axis(axis)).to_owned())
            .collect();
        let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
        let v = concatenate(Axis(axis), &views).unwrap();
        Ok(self.push(v, Op::Diag(x, axis)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Leaky ReLU with a learnable slope tensor of one element.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).len() != 1 {
            return Err(Error::shape("PReLU slope must have one element"));
        }
        let a = self.value(slope).iter().next().copied().unwrap();
        let v = self.value(x).mapv(|t| if t > 0.0 { t } else { a * t });
        Ok(self.push(v, Op::Prelu(x, slope)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a * sigmoid(a));
        self.push(v, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(softplus);
        self.push(v, Op::Softplus(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axes(x, &[axis])?;
        let t = self.value(x);
        let m = t.fold_axis(Axis(axis), f64::NEG_INFINITY, |a, &b| a.max(b)).insert_axis(Axis(axis));
        let e = (t - &m).mapv(f64::exp);
        let s = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let v = e / &s;
        Ok(self.push(v, Op::Softmax(x, axis)))
    }

    /// Training-mode batch norm over every axis but the last.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let shape = self.shape(x).to_vec();
        let f = *shape.last().ok_or_else(|| Error::shape("batch norm on a scalar"))?;
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(Error::shape(format!("batch norm affine params must have {f} entries")));
        }
        let x2 = to_2d(self.value(x));
        let m = x2.nrows() as f64;
        let mean = x2.mean_axis(Axis(0)).unwrap();
        let centered = &x2 - &mean;
        let var = centered.mapv(|a| a * a).sum_axis(Axis(0)) / m;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let g = Array1::from_iter(self.value(gamma).iter().copied());
        let b = Array1::from_iter(self.value(beta).iter().copied());
        let y = &xhat * &g + &b;
        let v = from_2d(y, &shape);
        let out = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((out, mean, var))
    }

    /// Reverse pass from a scalar (one-element) output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Config("backward on a no-grad tape".into()));
        }
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward needs a one-element output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(ArrayD::ones(self.value(out).raw_dim()));
        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(e) => *e += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=out.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(gy.clone(), self.shape(*a)));
                    acc(&mut grads, *b, reduce_to(gy.clone(), self.shape(*b)));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(gy.clone(), self.shape(*a)));
                    acc(&mut grads, *b, reduce_to(gy.mapv(|t| -t), self.shape(*b)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, reduce_to(&gy * vb, va.shape()));
                    acc(&mut grads, *b, reduce_to(&gy * va, vb.shape()));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy.mapv(|t| t * c)),
                Op::MatMul(x, w) => {
                    let w2 = self.value(*w).view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = to_2d_view(&gy);
                    let x2 = to_2d_view(self.value(*x));
                    acc(&mut grads, *x, from_2d(g2.dot(&w2.t()), self.shape(*x)));
                    acc(&mut grads, *w, x2.t().dot(&g2).into_dyn());
                }
                Op::Reshape(x) => {
                    let s = self.shape(*x).to_vec();
                    acc(&mut grads, *x, gy.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&s)).unwrap());
                }
                Op::BroadcastTo(x) => acc(&mut grads, *x, reduce_to(gy.clone(), self.shape(*x))),
                Op::Sum(x) => {
                    let s = self.shape(*x).to_vec();
                    acc(&mut grads, *x, gy.broadcast(IxDyn(&s)).unwrap().to_owned());
                }
                Op::Mean(x, axes) => {
                    let s = self.shape(*x).to_vec();
                    let n: usize = axes.iter().map(|&a| s[a]).product();
                    acc(&mut grads, *x, gy.broadcast(IxDyn(&s)).unwrap().mapv(|t| t / n as f64));
                }
                Op::Max(x, axes) => {
                    let xv = self.value(*x);
                    let mask = Zip::from(xv).and_broadcast(y).map_collect(|&a, &m| if a == m { 1.0 } else { 0.0 });
                    let count = reduce_keep(&mask, axes, |t, a| t.sum_axis(a));
                    let scale = &gy / &count;
                    acc(&mut grads, *x, &mask * &scale);
                }
                Op::Concat(xs, axis) => {
                    let mut start = 0;
                    for v in xs {
                        let len = self.shape(*v)[*axis];
                        let part = gy.slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len)).to_owned();
                        acc(&mut grads, *v, part);
                        start += len;
                    }
                }
                Op::Diag(x, axis) => {
                    let mut g = ArrayD::zeros(self.value(*x).raw_dim());
                    for i in 0..self.shape(*x)[*axis] {
                        g.index_axis_mut(Axis(*axis + 1), i)
                            .index_axis_mut(Axis(*axis), i)
                            .assign(&gy.index_axis(Axis(*axis), i));
                    }
                    acc(&mut grads, *x, g);
                }
                Op::Relu(x) => {
                    let g = Zip::from(&gy).and(self.value(*x)).map_collect(|&g, &a| if a > 0.0 { g } else { 0.0 });
                    acc(&mut grads, *x, g);
                }
                Op::Prelu(x, slope) => {
                    let a = *self.value(*slope).iter().next().unwrap();
                    let xv = self.value(*x);
                    let gx = Zip::from(&gy).and(xv).map_collect(|&g, &t| if t > 0.0 { g } else { a * g });
                    let ga: f64 = Zip::from(&gy).and(xv).fold(0.0, |s, &g, &t| if t > 0.0 { s } else { s + g * t });
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *slope, ArrayD::from_elem(self.value(*slope).raw_dim(), ga));
                }
                Op::Silu(x) => {
                    let g = Zip::from(&gy).and(self.value(*x)).map_collect(|&g, &a| {
                        let s = sigmoid(a);
                        g * (s + a * s * (1.0 - s))
                    });
                    acc(&mut grads, *x, g);
                }
                Op::Sigmoid(x) => acc(&mut grads, *x, Zip::from(&gy).and(y).map_collect(|&g, &s| g * s * (1.0 - s))),
                Op::Softplus(x) => {
                    acc(&mut grads, *x, Zip::from(&gy).and(self.value(*x)).map_collect(|&g, &a| g * sigmoid(a)))
                }
                Op::Softmax(x, axis) => {
                    let dot = (&gy * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                    acc(&mut grads, *x, y * &(&gy - &dot));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let g2 = to_2d(&gy);
                    let m = g2.nrows() as f64;
                    let gam = Array1::from_iter(self.value(*gamma).iter().copied());
                    let dgamma = (&g2 * xhat).sum_axis(Axis(0));
                    let dbeta = g2.sum_axis(Axis(0));
                    let dxhat = &g2 * &gam;
                    let s1 = dxhat.sum_axis(Axis(0));
                    let s2 = (&dxhat * xhat).sum_axis(Axis(0));
                    let dx = (&dxhat * m - &s1 - &(xhat * &s2)) * &(inv_std / m);
                    acc(&mut grads, *x, from_2d(dx, self.shape(*x)));
                    acc(&mut grads, *gamma, dgamma.into_shape_with_order(self.value(*gamma).raw_dim()).unwrap());
                    acc(&mut grads, *beta, dbeta.into_shape_with_order(self.value(*beta).raw_dim()).unwrap());
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every loaded parameter, indexed by store id.
    pub fn param_grads(&self, g: &Gradients, n_params: usize) -> Vec<Option<Tensor>> {
        let mut out: Vec<Option<Tensor>> = vec![None; n_params];
        for &(v, id) in &self.params {
            if let Some(gv) = g.get(v) {
                match &mut out[id] {
                    Some(e) => *e += gv,
                    slot => *slot = Some(gv.clone()),
                }
            }
        }
        out
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Named arrays: trainable parameters and non-trainable buffers (running
/// batch-norm statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

const CKPT_MAGIC: &[u8; 4] = b"SLPW";
const CKPT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push(Entry { name: name.into(), value, trainable: true });
        self.entries.len() - 1
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.entries.push(Entry { name: name.into(), value, trainable: false });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.entries[id].trainable
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Trainable scalars whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|e| e.trainable && e.name.starts_with(prefix)).map(|e| e.value.len()).sum()
    }

    /// Folds training-mode batch statistics into running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate], momentum: f64) {
        for u in updates {
            let n = u.batch_var.len();
            let rm = &mut self.entries[u.mean_id].value;
            Zip::from(rm.view_mut().into_shape_with_order(n).unwrap())
                .and(&u.batch_mean)
                .for_each(|r, &b| *r = (1.0 - momentum) * *r + momentum * b);
            let rv = &mut self.entries[u.var_id].value;
            Zip::from(rv.view_mut().into_shape_with_order(n).unwrap())
                .and(&u.batch_var)
                .for_each(|r, &b| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }

    /// Writes the versioned little-endian checkpoint.
    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let meta = serde_json::to_vec(meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.trainable as u8])?;
            w.write_all(&(e.value.ndim() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in e.value.as_standard_layout().iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a weight checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| Error::Format(e.to_string()))?;
            store.entries.push(Entry { name, value, trainable: flag[0] != 0 });
        }
        Ok((store, meta))
    }

    /// Copies values from `other` by name; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", e.name)))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::shape(format!("{}: {:?} vs {:?}", e.name, src.value.shape(), e.value.shape())));
            }
            e.value = src.value.clone();
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.value_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let m = self.m[id].get_or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self.v[id].get_or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
        Ok(())
    }
}
