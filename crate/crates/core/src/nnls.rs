//! Lawson–Hanson active-set solver for `min_{δ ⪰ 0} ‖A·δ + b‖²`.
//!
//! The solver works on the normal equations: with `G = AᵀA` and `q = Aᵀb` the
//! gradient is `g = 2(G·δ + q)` and every passive-set least-squares step is a
//! Cholesky solve on a principal submatrix of `G`. The problems in this crate
//! have at most `2K` unknowns, so forming `G` once is the cheap option.

use crate::error::{Error, Result};
use crate::linalg::{dot, spd_solve, RMatrix};

#[derive(Clone, Copy, Debug)]
pub struct NnlsOptions {
    /// Relative KKT tolerance, scaled by `max(‖Aᵀb‖_∞, 1)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        NnlsOptions { tol: 1e-9, max_iter: 500 }
    }
}

#[derive(Clone, Debug)]
pub struct NnlsSolution {
    pub delta: Vec<f64>,
    pub objective: f64,
    /// Indices held at zero (including zero columns).
    pub active_set: Vec<usize>,
    /// Main-loop iterations.
    pub iterations: usize,
    pub converged: bool,
    /// Absolute tolerance the KKT test used.
    pub tol: f64,
    /// Objective after each main-loop iteration.
    pub history: Vec<f64>,
}

impl NnlsSolution {
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::IterationLimit(self.iterations))
        }
    }
}

fn objective(a: &RMatrix, b: &[f64], delta: &[f64]) -> f64 {
    let r = a.mul_vec(delta);
    r.iter().zip(b).map(|(x, y)| (x + y).powi(2)).sum()
}

/// Passive-set solve of `G_PP z = −q_P`, with a small ridge if `G_PP` is singular.
fn passive_solve(g: &RMatrix, q: &[f64], passive: &[usize]) -> Vec<f64> {
    let p = passive.len();
    let sub = RMatrix::from_fn(p, p, |i, j| g[(passive[i], passive[j])]);
    let rhs: Vec<f64> = passive.iter().map(|&i| -q[i]).collect();
    match spd_solve(&sub, &rhs) {
        Ok(z) => z,
        Err(_) => {
            let trace: f64 = (0..p).map(|i| sub[(i, i)]).sum::<f64>().max(1.0);
            let mut ridge = 1e-12 * trace;
            loop {
                let mut reg = sub.clone();
                for i in 0..p {
                    reg[(i, i)] += ridge;
                }
                if let Ok(z) = spd_solve(&reg, &rhs) {
                    return z;
                }
                ridge *= 100.0;
            }
        }
    }
}

/// Solves `min_{δ ⪰ 0} ‖A·δ + b‖²`.
pub fn solve(a: &RMatrix, b: &[f64], opts: NnlsOptions) -> Result<NnlsSolution> {
    let n = a.cols();
    if a.rows() != b.len() {
        return Err(Error::shape(format!("A is {}x{}, b has {} entries", a.rows(), n, b.len())));
    }
    if a.as_slice().iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::shape("non-finite NNLS data"));
    }
    let g = a.gram();
    let q = a.tr_mul_vec(b);
    let bb = dot(b, b);
    let tol = opts.tol * q.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    // Zero columns stay in the active set for good.
    let max_diag = (0..n).map(|i| g[(i, i)]).fold(0.0, f64::max);
    let usable: Vec<bool> = (0..n).map(|i| g[(i, i)] > 1e-24 * max_diag.max(1e-300)).collect();

    let mut delta = vec![0.0; n];
    let mut passive: Vec<usize> = Vec::with_capacity(n);
    let mut in_passive = vec![false; n];
    let mut blocked = vec![false; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    let quad = |d: &[f64]| -> f64 {
        let gd = g.mul_vec(d);
        (dot(d, &gd) + 2.0 * dot(&q, d) + bb).max(0.0)
    };

    while iterations < opts.max_iter {
        // Half-gradient; the dual vector is its negative.
        let grad_half: Vec<f64> = g.mul_vec(&delta).iter().zip(&q).map(|(x, y)| x + y).collect();
        let candidate = (0..n)
            .filter(|&i| usable[i] && !in_passive[i] && !blocked[i])
            .map(|i| (i, -2.0 * grad_half[i]))
            .fold(None, |best: Option<(usize, f64)>, (i, w)| match best {
                Some((_, bw)) if bw >= w => best,
                _ => Some((i, w)),
            });
        let Some((j, w)) = candidate else {
            converged = true;
            break;
        };
        if w <= tol {
            converged = true;
            break;
        }
        iterations += 1;
        passive.push(j);
        in_passive[j] = true;

        let mut first = true;
        loop {
            let z = passive_solve(&g, &q, &passive);
            if z.iter().all(|&v| v > 0.0) {
                for (&i, &v) in passive.iter().zip(&z) {
                    delta[i] = v;
                }
                break;
            }
            if first && z[passive.len() - 1] <= 0.0 {
                // Numerically the new index cannot enter; skip it this round.
                passive.pop();
                in_passive[j] = false;
                blocked[j] = true;
                break;
            }
            first = false;
            // Step toward z until the first passive variable hits zero.
            let mut step = 1.0f64;
            for (&i, &zi) in passive.iter().zip(&z) {
                if zi <= 0.0 {
                    let denom = delta[i] - zi;
                    if denom > 0.0 {
                        step = step.min(delta[i] / denom);
                    }
                }
            }
            for (&i, &zi) in passive.iter().zip(&z) {
                delta[i] += step * (zi - delta[i]);
            }
            let scale = delta.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            passive.retain(|&i| {
                if delta[i] <= 1e-14 * scale {
                    delta[i] = 0.0;
                    in_passive[i] = false;
                    false
                } else {
                    true
                }
            });
            if passive.is_empty() {
                break;
            }
        }
        if !blocked[j] {
            blocked.iter_mut().for_each(|b| *b = false);
        }
        history.push(quad(&delta));
    }

    let active_set = (0..n).filter(|&i| delta[i] == 0.0).collect();
    Ok(NnlsSolution {
        objective: objective(a, b, &delta),
        delta,
        active_set,
        iterations,
        converged,
        tol,
        history,
    })
}

/// KKT residuals of a candidate `δ ⪰ 0`, with `g = 2Aᵀ(Aδ + b)`:
/// stationarity is the worst of `−g_i` on the zero set and `|g_i|` on the
/// support; slackness is `|Σ min(g_i, 0)·δ_i|`.
pub fn kkt_residuals(a: &RMatrix, b: &[f64], delta: &[f64]) -> (f64, f64) {
    let r: Vec<f64> = a.mul_vec(delta).iter().zip(b).map(|(x, y)| x + y).collect();
    let g: Vec<f64> = a.tr_mul_vec(&r).iter().map(|v| 2.0 * v).collect();
    let mut stationarity = 0.0f64;
    let mut slack = 0.0;
    for (&gi, &di) in g.iter().zip(delta) {
        if di == 0.0 {
            stationarity = stationarity.max(-gi);
        } else {
            stationarity = stationarity.max(gi.abs());
        }
        slack += gi.min(0.0) * di;
    }
    (stationarity, slack.abs())
}
