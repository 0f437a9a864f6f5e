//! Tensor-equivariant layers: MDE, the 2→1 HOE, MDI attention pooling,
//! FA-/EA-MDE attention, RMDE and the AMDE residual block.
//!
//! Every tensor carries a leading batch axis, so a 2-D feature map is
//! `N×K×L×F` with equivariant axes `[1, 2]`, and a 3-D map is `N×K×N_T×L×F`
//! with equivariant axes `[1, 2, 3]`. Parameters never depend on those
//! lengths.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{BnUpdate, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape plus read-only parameters.
pub struct Ctx<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    mode: Mode,
    cache: Vec<Option<Var>>,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Ctx { g: Graph::new(), store, mode, cache: vec![None; store.len()] }
    }

    /// Eval-mode pass on a tape that keeps no backward records.
    pub fn inference(store: &'s ParamStore) -> Self {
        Ctx { g: Graph::no_grad(), store, mode: Mode::Eval, cache: vec![None; store.len()] }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.cache[id] {
            return v;
        }
        let v = self.g.param(self.store, id);
        self.cache[id] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.g.leaf(t)
    }

    /// Parameter gradients of a scalar output, indexed by store id.
    pub fn backward(&self, out: Var) -> Result<Vec<Option<Tensor>>> {
        let grads = self.g.backward(out)?;
        Ok(self.g.param_grads(&grads, self.store.len()))
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        self.g.take_bn_updates()
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).unwrap()
}

/// Non-empty and empty subsets of `axes`, as lists of axes.
fn subsets(axes: &[usize]) -> Vec<Vec<usize>> {
    (0..1usize << axes.len())
        .map(|mask| axes.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &a)| a).collect())
        .collect()
}

/// Fully connected map on the feature axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, f_in: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (f_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), uniform(rng, &[f_in, f_out], bound));
        let b = store.add(format!("{name}.b"), uniform(rng, &[f_out], bound));
        Linear { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let y = cx.g.matmul(x, w)?;
        cx.g.add(y, b)
    }
}

/// Batch norm over every axis but the feature axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub mean: usize,
    pub var: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, f: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[f]))),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[f]))),
            mean: store.add_buffer(format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[f]))),
            var: store.add_buffer(format!("{name}.running_var"), ArrayD::ones(IxDyn(&[f]))),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (gamma, beta) = (cx.p(self.gamma), cx.p(self.beta));
        match cx.mode {
            Mode::Train => {
                let (y, mean, var) = cx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                let m = (cx.g.value(x).len() / mean.len().max(1)) as f64;
                let unbiased = if m > 1.0 { var * (m / (m - 1.0)) } else { var };
                cx.g.bn_updates.push(BnUpdate { mean_id: self.mean, var_id: self.var, batch_mean: mean, batch_var: unbiased });
                Ok(y)
            }
            Mode::Eval => {
                let mean = cx.store.value(self.mean).clone();
                let inv = cx.store.value(self.var).mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let mean = cx.g.leaf(mean);
                let inv = cx.g.leaf(inv);
                let scale = cx.g.mul(gamma, inv)?;
                let ms = cx.g.mul(mean, scale)?;
                let shift = cx.g.sub(beta, ms)?;
                let y = cx.g.mul(x, scale)?;
                cx.g.add(y, shift)
            }
        }
    }
}

/// PReLU with one shared slope.
#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: usize,
}

impl Prelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Prelu { slope: store.add(format!("{name}.slope"), ArrayD::from_elem(IxDyn(&[1]), PRELU_INIT)) }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let a = cx.p(self.slope);
        cx.g.prelu(x, a)
    }
}

/// Multidimensional equivariant layer: `Σ_𝒟 mean_𝒟(X)·W_𝒟 + b`.
#[derive(Clone, Debug)]
pub struct Mde {
    pub axes: Vec<usize>,
    pub weights: Vec<(Vec<usize>, usize)>,
    pub b: usize,
}

impl Mde {
    pub fn new(store: &mut ParamStore, name: &str, axes: &[usize], f_in: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        let subs = subsets(axes);
        let bound = (1.0 / (subs.len() * f_in) as f64).sqrt();
        let weights = subs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                let id = store.add(format!("{name}.w{i}"), uniform(rng, &[f_in, f_out], bound));
                (s, id)
            })
            .collect();
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[f_out])));
        Mde { axes: axes.to_vec(), weights, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        if cx.g.shape(x).len() != self.axes.len() + 2 {
            return Err(Error::shape(format!(
                "MDE over {} axes got rank {}",
                self.axes.len(),
                cx.g.shape(x).len()
            )));
        }
        let mut acc: Option<Var> = None;
        for (sub, id) in &self.weights {
            let w = cx.p(*id);
            let xm = if sub.is_empty() { x } else { cx.g.mean(x, sub)? };
            let t = cx.g.matmul(xm, w)?;
            acc = Some(match acc {
                Some(a) => cx.g.add(a, t)?,
                None => t,
            });
        }
        let b = cx.p(self.b);
        cx.g.add(acc.unwrap(), b)
    }
}

/// Order-2→order-1 equivariant layer mapping `N×K×K×L×F` to `N×K×L×F_O`.
#[derive(Clone, Debug)]
pub struct Hoe {
    pub weights: [usize; 10],
    pub b: usize,
}

impl Hoe {
    pub fn new(store: &mut ParamStore, name: &str, f_in: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / (10 * f_in) as f64).sqrt();
        let weights = std::array::from_fn(|i| store.add(format!("{name}.w{i}"), uniform(rng, &[f_in, f_out], bound)));
        let b = store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[f_out])));
        Hoe { weights, b }
    }

    pub fn forward(&self, cx: &mut Ctx, c: Var) -> Result<Var> {
        let s = cx.g.shape(c).to_vec();
        if s.len() != 5 || s[1] != s[2] {
            return Err(Error::shape(format!("HOE expects N×K×K×L×F, got {s:?}")));
        }
        let (n, k, l, f) = (s[0], s[1], s[3], s[4]);
        let diag = cx.g.diag(c, 1)?;
        let row = cx.g.mean(c, &[2])?;
        let row = cx.g.reshape(row, &[n, k, l, f])?;
        let col = cx.g.mean(c, &[1])?;
        let col = cx.g.reshape(col, &[n, k, l, f])?;
        let all = cx.g.mean(c, &[1, 2])?;
        let all = cx.g.reshape(all, &[n, 1, l, f])?;
        let dmean = cx.g.mean(diag, &[1])?;
        let mut acc: Option<Var> = None;
        for (i, basis) in [diag, row, col, all, dmean].into_iter().enumerate() {
            for pooled in [false, true] {
                let t = if pooled { cx.g.mean(basis, &[2])? } else { basis };
                let w = cx.p(self.weights[2 * i + pooled as usize]);
                let t = cx.g.matmul(t, w)?;
                acc = Some(match acc {
                    Some(a) => cx.g.add(a, t)?,
                    None => t,
                });
            }
        }
        let b = cx.p(self.b);
        cx.g.add(acc.unwrap(), b)
    }
}

/// Multi-head learned-query attention pooling over one axis.
#[derive(Clone, Debug)]
pub struct Mdi {
    pub axis: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub key: usize,
    pub value: Linear,
}

impl Mdi {
    /// Output width is `heads · head_dim`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        axis: usize,
        f_in: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Query·(W_k x) per head folds into one F×H map.
        let bound = 1.0 / (f_in as f64).sqrt();
        let key = store.add(format!("{name}.key"), uniform(rng, &[f_in, heads], bound));
        let value = Linear::new(store, &format!("{name}.value"), f_in, heads * head_dim, rng);
        Mdi { axis, heads, head_dim, key, value }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if self.axis == 0 || self.axis + 1 >= s.len() {
            return Err(Error::shape(format!("cannot pool axis {} of {s:?}", self.axis)));
        }
        let wk = cx.p(self.key);
        let scores = cx.g.matmul(x, wk)?;
        let attn = cx.g.softmax(scores, self.axis)?;
        let vals = self.value.forward(cx, x)?;
        let mut head_shape = s[..s.len() - 1].to_vec();
        head_shape.extend([self.heads, self.head_dim]);
        let vals = cx.g.reshape(vals, &head_shape)?;
        let mut attn_shape = s[..s.len() - 1].to_vec();
        attn_shape.extend([self.heads, 1]);
        let attn = cx.g.reshape(attn, &attn_shape)?;
        let weighted = cx.g.mul(vals, attn)?;
        let pooled = cx.g.sum(weighted, &[self.axis])?;
        let mut out = s[..s.len() - 1].to_vec();
        out.remove(self.axis);
        out.push(self.heads * self.head_dim);
        cx.g.reshape(pooled, &out)
    }
}

/// Feature attention: `sigmoid(f(max_𝒟 X) + f(mean_𝒟 X))`, `f = FC∘ReLU∘FC`.
#[derive(Clone, Debug)]
pub struct FaMde {
    pub axes: Vec<usize>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FaMde {
    pub fn new(store: &mut ParamStore, name: &str, axes: &[usize], f: usize, rng: &mut impl Rng) -> Self {
        FaMde {
            axes: axes.to_vec(),
            fc1: Linear::new(store, &format!("{name}.fc1"), f, f, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), f, f, rng),
        }
    }

    fn mlp(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.relu(h);
        self.fc2.forward(cx, h)
    }

    /// Attention map broadcastable against `x`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mx = cx.g.max(x, &self.axes)?;
        let mn = cx.g.mean(x, &self.axes)?;
        let a = self.mlp(cx, mx)?;
        let b = self.mlp(cx, mn)?;
        let s = cx.g.add(a, b)?;
        Ok(cx.g.sigmoid(s))
    }
}

/// Reduced MDE: `Σ_𝒟 ReLU(mean_𝒟(X)·W_𝒟 + b_𝒟)`.
#[derive(Clone, Debug)]
pub struct Rmde {
    pub fcs: Vec<(Vec<usize>, Linear)>,
}

impl Rmde {
    pub fn new(store: &mut ParamStore, name: &str, axes: &[usize], f_in: usize, f_out: usize, rng: &mut impl Rng) -> Self {
        let fcs = subsets(axes)
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, Linear::new(store, &format!("{name}.fc{i}"), f_in, f_out, rng)))
            .collect();
        Rmde { fcs }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (sub, fc) in &self.fcs {
            let xm = if sub.is_empty() { x } else { cx.g.mean(x, sub)? };
            let t = fc.forward(cx, xm)?;
            let t = cx.g.relu(t);
            acc = Some(match acc {
                Some(a) => cx.g.add(a, t)?,
                None => t,
            });
        }
        Ok(acc.unwrap())
    }
}

/// Equivariant-position attention: `sigmoid(RMDE([max_F X, mean_F X]))`.
#[derive(Clone, Debug)]
pub struct EaMde {
    pub rmde: Rmde,
}

impl EaMde {
    pub fn new(store: &mut ParamStore, name: &str, axes: &[usize], rng: &mut impl Rng) -> Self {
        EaMde { rmde: Rmde::new(store, &format!("{name}.rmde"), axes, 2, 1, rng) }
    }

    /// Attention map with feature width 1.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let last = cx.g.shape(x).len() - 1;
        let mx = cx.g.max(x, &[last])?;
        let mn = cx.g.mean(x, &[last])?;
        let z = cx.g.concat(&[mx, mn], last)?;
        let r = self.rmde.forward(cx, z)?;
        Ok(cx.g.sigmoid(r))
    }
}

/// Attention-based residual MDE block (2-D or 3-D by its axes).
#[derive(Clone, Debug)]
pub struct Amde {
    pub mde1: Mde,
    pub bn1: BatchNorm,
    pub act1: Prelu,
    pub mde2: Mde,
    pub bn2: BatchNorm,
    pub fa: FaMde,
    pub ea: EaMde,
    pub act_out: Prelu,
}

impl Amde {
    /// `fa_axes` are the pooling axes of the feature attention.
    pub fn new(store: &mut ParamStore, name: &str, axes: &[usize], fa_axes: &[usize], f: usize, rng: &mut impl Rng) -> Self {
        Amde {
            mde1: Mde::new(store, &format!("{name}.mde1"), axes, f, f, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), f),
            act1: Prelu::new(store, &format!("{name}.act1")),
            mde2: Mde::new(store, &format!("{name}.mde2"), axes, f, f, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), f),
            fa: FaMde::new(store, &format!("{name}.fa"), fa_axes, f, rng),
            ea: EaMde::new(store, &format!("{name}.ea"), axes, rng),
            act_out: Prelu::new(store, &format!("{name}.act_out")),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.mde1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = self.act1.forward(cx, h)?;
        let h = self.mde2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let fa = self.fa.forward(cx, h)?;
        let f = cx.g.mul(fa, h)?;
        let ea = self.ea.forward(cx, f)?;
        let f = cx.g.mul(ea, f)?;
        let o = cx.g.add(f, x)?;
        self.act_out.forward(cx, o)
    }
}
