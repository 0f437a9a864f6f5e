#![allow(dead_code)]

use std::io::Write;

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use slpkit::autodiff::{Graph, ParamStore, Tensor, Var};
use slpkit::linalg::{CMatrix, RMatrix};
use slpkit::te::{Ctx, Mode};
use slpkit::Complex64;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Prints one result line straight to stderr so it shows even when the test
/// harness captures output.
pub fn report(id: &str, passed: bool, detail: &str) {
    let line = format!("criterion {id}: {} ({detail})\n", if passed { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

pub fn rand_t(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn shuffled(r: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), r);
    p
}

pub fn permute(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    t.select(Axis(axis), perm)
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Eval-mode forward of a single-input layer on a no-grad tape.
pub fn run(store: &ParamStore, x: &Tensor, f: &dyn Fn(&mut Ctx, Var) -> Var) -> Tensor {
    let mut cx = Ctx::inference(store);
    let xv = cx.input(x.clone());
    let y = f(&mut cx, xv);
    cx.g.value(y).clone()
}

/// Dense Gaussian elimination with partial pivoting; `None` when singular.
pub fn gauss_solve(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &v)| row.iter().copied().chain([v]).collect()).collect();
    let scale = a.iter().flatten().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        m.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..=n {
                m[row][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| m[row][c] * x[c]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    Some(x)
}

/// `‖A·δ + b‖²`.
pub fn nnls_objective(a: &RMatrix, b: &[f64], d: &[f64]) -> f64 {
    (0..a.rows()).map(|i| (0..a.cols()).map(|j| a[(i, j)] * d[j]).sum::<f64>() + b[i]).map(|r| r * r).sum()
}

/// Minimum of `‖A·δ + b‖²` over `δ ⪰ 0` by trying every support: the
/// unconstrained minimizer on each nonsingular support is kept when it is
/// nonnegative.
pub fn nnls_enumerate(a: &RMatrix, b: &[f64]) -> f64 {
    let n = a.cols();
    let mut best = nnls_objective(a, b, &vec![0.0; n]);
    for mask in 1u32..(1 << n) {
        let sup: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let gram: Vec<Vec<f64>> = sup
            .iter()
            .map(|&i| sup.iter().map(|&j| (0..a.rows()).map(|r| a[(r, i)] * a[(r, j)]).sum()).collect())
            .collect();
        let rhs: Vec<f64> = sup.iter().map(|&i| -(0..a.rows()).map(|r| a[(r, i)] * b[r]).sum::<f64>()).collect();
        if let Some(z) = gauss_solve(&gram, &rhs) {
            if z.iter().all(|&v| v >= 0.0) {
                let mut d = vec![0.0; n];
                for (&i, &v) in sup.iter().zip(&z) {
                    d[i] = v;
                }
                best = best.min(nnls_objective(a, b, &d));
            }
        }
    }
    best
}

/// Random channel whose rows are mutually orthogonal with random norms.
pub fn orthogonal_rows(r: &mut impl Rng, k: usize, nt: usize) -> CMatrix {
    let mut rows: Vec<Vec<Complex64>> = Vec::new();
    for _ in 0..k {
        let mut v: Vec<Complex64> = (0..nt).map(|_| Complex64::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect();
        for u in &rows {
            let proj: Complex64 = u.iter().zip(&v).map(|(a, b)| a.conj() * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= ui * proj;
            }
        }
        let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        rows.push(v.iter().map(|z| z / norm).collect());
    }
    let gains: Vec<f64> = (0..k).map(|_| r.random_range(0.3..3.0)).collect();
    CMatrix::from_fn(k, nt, |i, j| rows[i][j] * gains[i])
}

/// Fixed pseudo-random weights that collapse a tensor to a scalar.
fn probe(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect()).unwrap()
}

fn scalarize(g: &mut Graph, y: Var) -> Var {
    let w = probe(g.shape(y));
    let wv = g.leaf(w);
    let p = g.mul(y, wv).unwrap();
    let axes: Vec<usize> = (0..g.shape(p).len()).collect();
    g.sum(p, &axes).unwrap()
}

pub fn rel_err(num: f64, ana: f64) -> f64 {
    (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3)
}

pub const FD_STEP: f64 = 1e-6;

/// Worst relative error between reverse-mode and central-difference
/// gradients of a multi-input tape op, over every input coordinate.
pub fn op_grad_error(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &vs);
        let s = scalarize(&mut g, y);
        *g.value(s).iter().next().unwrap()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vs);
    let s = scalarize(&mut g, y);
    let grads = g.backward(s).unwrap();
    let mut worst = 0f64;
    for (i, t) in inputs.iter().enumerate() {
        let ana = grads.get(vs[i]).cloned().unwrap_or_else(|| ArrayD::zeros(t.raw_dim())).as_standard_layout().into_owned();
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[j] += FD_STEP;
            minus[i].as_slice_mut().unwrap()[j] -= FD_STEP;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(num, ana.as_slice().unwrap()[j]));
        }
    }
    worst
}

/// Worst relative gradient error of a network at `points` random input
/// coordinates and `points` random trainable parameter entries.
pub fn net_grad_error(
    store: &ParamStore,
    inputs: &[Tensor],
    mode: Mode,
    points: usize,
    r: &mut impl Rng,
    f: &dyn Fn(&mut Ctx, &[Var]) -> Var,
) -> f64 {
    let eval = |store: &ParamStore, xs: &[Tensor]| -> f64 {
        let mut cx = Ctx::new(store, mode);
        let vs: Vec<Var> = xs.iter().map(|t| cx.input(t.clone())).collect();
        let y = f(&mut cx, &vs);
        let s = scalarize(&mut cx.g, y);
        *cx.g.value(s).iter().next().unwrap()
    };
    let mut cx = Ctx::new(store, mode);
    let vs: Vec<Var> = inputs.iter().map(|t| cx.input(t.clone())).collect();
    let y = f(&mut cx, &vs);
    let s = scalarize(&mut cx.g, y);
    let pgrads = cx.backward(s).unwrap();
    let xgrads = cx.g.backward(s).unwrap();
    let mut worst = 0f64;
    for _ in 0..points {
        let i = r.random_range(0..inputs.len());
        let j = r.random_range(0..inputs[i].len());
        let ana = xgrads.get(vs[i]).map_or(0.0, |g| g.as_standard_layout().as_slice().unwrap()[j]);
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        plus[i].as_slice_mut().unwrap()[j] += FD_STEP;
        minus[i].as_slice_mut().unwrap()[j] -= FD_STEP;
        let num = (eval(store, &plus) - eval(store, &minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(num, ana));
    }
    let trainable: Vec<usize> = (0..store.len()).filter(|&id| store.is_trainable(id)).collect();
    for _ in 0..points {
        let id = trainable[r.random_range(0..trainable.len())];
        let j = r.random_range(0..store.value(id).len());
        let ana = pgrads[id].as_ref().map_or(0.0, |g| g.as_standard_layout().as_slice().unwrap()[j]);
        let mut sp = store.clone();
        let mut sm = store.clone();
        sp.value_mut(id).as_slice_mut().unwrap()[j] += FD_STEP;
        sm.value_mut(id).as_slice_mut().unwrap()[j] -= FD_STEP;
        let num = (eval(&sp, inputs) - eval(&sm, inputs)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(num, ana));
    }
    worst
}
