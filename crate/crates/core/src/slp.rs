//! Exact CIZF/CIMMSE precoding, KKT feature tensors, post-network
//! refinement, block power reallocation and the linear baselines.
//!
//! Both criteria share the per-symbol problem
//! `min_{δ ⪰ 0} s̃ᴴ Υ s̃` with `s̃ = s + Λ_μ δ_μ + Λ_ν δ_ν`, which becomes an
//! NNLS problem `‖M Λ δ + M s‖²` for any real `M` with `MᵀM = R(Υ)`.

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    cholesky_upper, hermitian_inverse, norm_sqr, pseudo_inverse_fat, quad_form, real_composite,
    real_composite_vec, CMatrix, RMatrix,
};
use crate::modulation::{CirCoefficients, Constellation};
use crate::nnls::{self, NnlsOptions, NnlsSolution};
use crate::par::{self, Execution};

/// Which closed form the precoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "criterion", rename_all = "lowercase")]
pub enum Criterion {
    /// CIZF / ZF: `Υ = (HHᴴ)⁻¹`, `P = H†`.
    Zf,
    /// CIMMSE / MMSE: `Υ = (HHᴴ + σ²K/P_T·I)⁻¹`, `P = HᴴΥ`.
    Mmse { sigma2: f64 },
}

impl Criterion {
    pub fn upsilon(&self, h: &CMatrix, p_t: f64) -> Result<CMatrix> {
        match *self {
            Criterion::Zf => upsilon_zf(h),
            Criterion::Mmse { sigma2 } => upsilon_mmse(h, sigma2, p_t),
        }
    }

    /// Precoding matrix `P` (N_T×K).
    pub fn precoder(&self, h: &CMatrix, p_t: f64) -> Result<CMatrix> {
        match *self {
            Criterion::Zf => pseudo_inverse_fat(h),
            Criterion::Mmse { sigma2 } => Ok(h.hermitian().matmul(&upsilon_mmse(h, sigma2, p_t)?)),
        }
    }

    /// Real metric `M` with `MᵀM = R(Υ)` used to pose the NNLS problem.
    pub fn nnls_metric(&self, h: &CMatrix, p_t: f64) -> Result<RMatrix> {
        match *self {
            Criterion::Zf => Ok(real_composite(&pseudo_inverse_fat(h)?)),
            Criterion::Mmse { sigma2 } => cholesky_upper(&real_composite(&upsilon_mmse(h, sigma2, p_t)?)),
        }
    }
}

/// `(HHᴴ)⁻¹`.
pub fn upsilon_zf(h: &CMatrix) -> Result<CMatrix> {
    hermitian_inverse(&h.matmul(&h.hermitian())).map_err(|_| Error::RankDeficient)
}

/// `(HHᴴ + σ²K/P_T·I)⁻¹`.
pub fn upsilon_mmse(h: &CMatrix, sigma2: f64, p_t: f64) -> Result<CMatrix> {
    if sigma2 < 0.0 || p_t <= 0.0 {
        return Err(Error::Config(format!("need σ² ≥ 0 and P_T > 0, got {sigma2}, {p_t}")));
    }
    let reg = sigma2 * h.rows() as f64 / p_t;
    hermitian_inverse(&h.matmul(&h.hermitian()).add_diag(reg)).map_err(|_| Error::RankDeficient)
}

/// `Υ/‖Υ‖_F`.
pub fn frobenius_normalize(u: &CMatrix) -> CMatrix {
    let n = u.frobenius_norm();
    if n > 0.0 {
        u.scale_real(1.0 / n)
    } else {
        u.clone()
    }
}

/// Precoded block before and after block-level power reallocation.
#[derive(Clone, Debug)]
pub struct PrecodedBlock {
    /// Per-symbol transmit vectors, N_T×L, each with `‖x[l]‖² = P_T`.
    pub x: CMatrix,
    /// Reallocated vectors `x̄[l] = (γ̄/γ[l])·x[l]`.
    pub x_bar: CMatrix,
    pub gamma: Vec<f64>,
    pub gamma_bar: f64,
}

/// `γ̄ = √(L / Σ 1/γ[l]²)`, `x̄[l] = (γ̄/γ[l])·x[l]`.
pub fn block_power_realloc(gamma: &[f64], x: &CMatrix) -> Result<(f64, CMatrix)> {
    if gamma.len() != x.cols() {
        return Err(Error::shape(format!("{} scaling factors for {} symbols", gamma.len(), x.cols())));
    }
    if let Some(&g) = gamma.iter().find(|&&g| !(g > 0.0) || !g.is_finite()) {
        return Err(Error::NonPositiveGamma(g));
    }
    let inv_sum: f64 = gamma.iter().map(|g| 1.0 / (g * g)).sum();
    let gamma_bar = (gamma.len() as f64 / inv_sum).sqrt();
    let x_bar = CMatrix::from_fn(x.rows(), x.cols(), |r, l| x[(r, l)] * (gamma_bar / gamma[l]));
    Ok((gamma_bar, x_bar))
}

/// `x = γ·P·s̃` with `γ = √(P_T/‖P s̃‖²)` per column of `s_tilde`, then reallocation.
pub fn precode_closed_form(precoders: &[&CMatrix], s_tilde: &Array2<Complex64>, p_t: f64) -> Result<PrecodedBlock> {
    let l_len = s_tilde.ncols();
    let nt = precoders[0].rows();
    let mut x = CMatrix::zeros(nt, l_len);
    let mut gamma = Vec::with_capacity(l_len);
    for l in 0..l_len {
        let p = precoders[if precoders.len() == 1 { 0 } else { l }];
        let v = p.mul_vec(&s_tilde.column(l).to_vec());
        let e = norm_sqr(&v);
        if !(e > 0.0) {
            return Err(Error::NonPositiveGamma(0.0));
        }
        let g = (p_t / e).sqrt();
        gamma.push(g);
        x.set_column(l, &v.iter().map(|z| z * g).collect::<Vec<_>>());
    }
    let (gamma_bar, x_bar) = block_power_realloc(&gamma, &x)?;
    Ok(PrecodedBlock { x, x_bar, gamma, gamma_bar })
}

/// `s̃[l] = s[l] + Λ_μ δ_μ + Λ_ν δ_ν` for the whole block, with `d` shaped K×L×2.
pub fn perturbed_symbols(s: &Array2<Complex64>, cir: &CirCoefficients, d: &Array3<f64>) -> Array2<Complex64> {
    Array2::from_shape_fn(s.dim(), |(k, l)| s[(k, l)] + cir.mu[(k, l)] * d[(k, l, 0)] + cir.nu[(k, l)] * d[(k, l, 1)])
}

/// The NNLS data `(A, b) = (M·Λ[l], M·R(s[l]))` of symbol `l`.
pub fn perturbation_problem(metric: &RMatrix, s: &Array2<Complex64>, cir: &CirCoefficients, l: usize) -> (RMatrix, Vec<f64>) {
    let a = metric.matmul(&cir.lambda(l));
    let b = metric.mul_vec(&real_composite_vec(&s.column(l).to_vec()));
    (a, b)
}

/// Result of an exact per-symbol solve over a block.
#[derive(Clone, Debug)]
pub struct SlpSolution {
    pub block: PrecodedBlock,
    /// Optimal perturbation factors, K×L×2 (`[.., 0] = δ_μ`, `[.., 1] = δ_ν`).
    pub d: Array3<f64>,
    pub s_tilde: Array2<Complex64>,
    pub nnls: Vec<NnlsSolution>,
}

/// Solves every symbol's NNLS problem for a fixed metric; returns D (K×L×2).
pub fn solve_perturbations(
    metric: &RMatrix,
    s: &Array2<Complex64>,
    cir: &CirCoefficients,
    opts: NnlsOptions,
    exec: Execution,
) -> Result<(Array3<f64>, Vec<NnlsSolution>)> {
    let (k, l_len) = s.dim();
    let sols = par::try_map_range(exec, l_len, |l| {
        let (a, b) = perturbation_problem(metric, s, cir, l);
        nnls::solve(&a, &b, opts)?.ensure_converged()
    })?;
    let mut d = Array3::zeros((k, l_len, 2));
    for (l, sol) in sols.iter().enumerate() {
        for i in 0..k {
            d[(i, l, 0)] = sol.delta[i];
            d[(i, l, 1)] = sol.delta[k + i];
        }
    }
    Ok((d, sols))
}

fn exact_solve(
    criterion: Criterion,
    h: &CMatrix,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    exec: Execution,
) -> Result<SlpSolution> {
    if h.rows() != symbols.nrows() {
        return Err(Error::shape(format!("{} channel rows for {} users", h.rows(), symbols.nrows())));
    }
    let metric = criterion.nnls_metric(h, p_t)?;
    let s = c.map_symbols(symbols);
    let cir = CirCoefficients::from_symbols(symbols, c);
    let (d, nnls) = solve_perturbations(&metric, &s, &cir, NnlsOptions::default(), exec)?;
    let s_tilde = perturbed_symbols(&s, &cir, &d);
    let p = criterion.precoder(h, p_t)?;
    let block = precode_closed_form(&[&p], &s_tilde, p_t)?;
    Ok(SlpSolution { block, d, s_tilde, nnls })
}

/// Optimal CIZF precoding of a block.
pub fn cizf_optimal(h: &CMatrix, symbols: &Array2<usize>, c: &Constellation, p_t: f64, exec: Execution) -> Result<SlpSolution> {
    exact_solve(Criterion::Zf, h, symbols, c, p_t, exec)
}

/// Optimal CIMMSE precoding of a block.
pub fn cimmse_optimal(
    h: &CMatrix,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    exec: Execution,
) -> Result<SlpSolution> {
    exact_solve(Criterion::Mmse { sigma2 }, h, symbols, c, p_t, exec)
}

/// Symbol-level-power-constrained linear precoding `x = γ·P·s`.
pub fn linear_precode(criterion: Criterion, h: &CMatrix, symbols: &Array2<usize>, c: &Constellation, p_t: f64) -> Result<PrecodedBlock> {
    let p = criterion.precoder(h, p_t)?;
    precode_closed_form(&[&p], &c.map_symbols(symbols), p_t)
}

pub fn lp_zf(h: &CMatrix, symbols: &Array2<usize>, c: &Constellation, p_t: f64) -> Result<PrecodedBlock> {
    linear_precode(Criterion::Zf, h, symbols, c, p_t)
}

pub fn lp_mmse(h: &CMatrix, symbols: &Array2<usize>, c: &Constellation, p_t: f64, sigma2: f64) -> Result<PrecodedBlock> {
    linear_precode(Criterion::Mmse { sigma2 }, h, symbols, c, p_t)
}

/// KKT information of a block.
#[derive(Clone, Debug)]
pub struct KktFeatures {
    /// `[Λ_μᴴΥs, Λ_νᴴΥs]` per symbol, K×L×2.
    pub b_c: Array3<Complex64>,
    /// `[Λ_μᴴΥΛ_μ, Λ_μᴴΥΛ_ν, Λ_νᴴΥΛ_μ, Λ_νᴴΥΛ_ν]` per symbol, K×K×L×4.
    pub c_c: Array4<Complex64>,
}

impl KktFeatures {
    /// `[Re B_c, Im B_c]` stacked on the last axis, K×L×4.
    pub fn b_real(&self) -> Array3<f64> {
        let (k, l, _) = self.b_c.dim();
        Array3::from_shape_fn((k, l, 4), |(i, j, f)| {
            let z = self.b_c[(i, j, f % 2)];
            if f < 2 { z.re } else { z.im }
        })
    }

    /// `[Re C_c, Im C_c]` stacked on the last axis, K×K×L×8.
    pub fn c_real(&self) -> Array4<f64> {
        let (k, k2, l, _) = self.c_c.dim();
        Array4::from_shape_fn((k, k2, l, 8), |(i, j, t, f)| {
            let z = self.c_c[(i, j, t, f % 4)];
            if f < 4 { z.re } else { z.im }
        })
    }

    /// Inverse of [`b_real`](Self::b_real) / [`c_real`](Self::c_real).
    pub fn from_real(b: &Array3<f64>, c: &Array4<f64>) -> Self {
        let (k, l, _) = b.dim();
        let k2 = c.dim().1;
        KktFeatures {
            b_c: Array3::from_shape_fn((k, l, 2), |(i, j, f)| Complex64::new(b[(i, j, f)], b[(i, j, f + 2)])),
            c_c: Array4::from_shape_fn((k, k2, l, 4), |(i, j, t, f)| Complex64::new(c[(i, j, t, f)], c[(i, j, t, f + 4)])),
        }
    }
}

/// Builds `B_c` and `C_c`. `upsilons` holds one matrix shared by the block or
/// one per symbol; each is Frobenius-normalized before use.
pub fn kkt_features(upsilons: &[CMatrix], symbols: &Array2<usize>, c: &Constellation) -> Result<KktFeatures> {
    let (k, l_len) = symbols.dim();
    if upsilons.is_empty() || (upsilons.len() != 1 && upsilons.len() != l_len) {
        return Err(Error::shape(format!("{} Υ matrices for {l_len} symbols", upsilons.len())));
    }
    if upsilons.iter().any(|u| u.rows() != k || u.cols() != k) {
        return Err(Error::shape(format!("Υ must be {k}x{k}")));
    }
    let normed: Vec<CMatrix> = upsilons.iter().map(frobenius_normalize).collect();
    let cir = CirCoefficients::from_symbols(symbols, c);
    let s = c.map_symbols(symbols);
    let mut b_c = Array3::zeros((k, l_len, 2));
    let mut c_c = Array4::zeros((k, k, l_len, 4));
    for l in 0..l_len {
        let u = &normed[if normed.len() == 1 { 0 } else { l }];
        let us = u.mul_vec(&s.column(l).to_vec());
        for i in 0..k {
            let (mu_i, nu_i) = (cir.mu[(i, l)].conj(), cir.nu[(i, l)].conj());
            b_c[(i, l, 0)] = mu_i * us[i];
            b_c[(i, l, 1)] = nu_i * us[i];
            for j in 0..k {
                let (mu_j, nu_j) = (cir.mu[(j, l)], cir.nu[(j, l)]);
                let uij = u[(i, j)];
                c_c[(i, j, l, 0)] = mu_i * uij * mu_j;
                c_c[(i, j, l, 1)] = mu_i * uij * nu_j;
                c_c[(i, j, l, 2)] = nu_i * uij * mu_j;
                c_c[(i, j, l, 3)] = nu_i * uij * nu_j;
            }
        }
    }
    Ok(KktFeatures { b_c, c_c })
}

/// Scales a predicted perturbation along its own direction:
/// `ρ[l] = max{0, −(sᴴΥp + pᴴΥs)/(2pᴴΥp)}` (0 when `p = 0`), `s̃ = s + ρ·p`.
pub fn post_refine(
    upsilons: &[CMatrix],
    s: &Array2<Complex64>,
    cir: &CirCoefficients,
    d_hat: &Array3<f64>,
) -> (Vec<f64>, Array2<Complex64>) {
    let (k, l_len) = s.dim();
    let mut rho = vec![0.0; l_len];
    let mut s_tilde = s.clone();
    for l in 0..l_len {
        let u = &upsilons[if upsilons.len() == 1 { 0 } else { l }];
        let dm: Vec<f64> = (0..k).map(|i| d_hat[(i, l, 0)]).collect();
        let dn: Vec<f64> = (0..k).map(|i| d_hat[(i, l, 1)]).collect();
        let p = cir.perturbation(l, &dm, &dn);
        if p.iter().all(|z| *z == Complex64::new(0.0, 0.0)) {
            continue;
        }
        let sl = s.column(l).to_vec();
        let up = u.mul_vec(&p);
        let ppp = crate::linalg::cdot(&p, &up).re;
        // sᴴΥp + pᴴΥs = 2·Re(sᴴΥp) for Hermitian Υ.
        let cross = 2.0 * crate::linalg::cdot(&sl, &up).re;
        if ppp > 0.0 {
            rho[l] = (-cross / (2.0 * ppp)).max(0.0);
        }
        for i in 0..k {
            s_tilde[(i, l)] = sl[i] + p[i] * rho[l];
        }
    }
    (rho, s_tilde)
}

/// `s̃[l]ᴴ Υ s̃[l]` for each symbol.
pub fn block_objective(upsilons: &[CMatrix], s_tilde: &Array2<Complex64>) -> Vec<f64> {
    (0..s_tilde.ncols())
        .map(|l| quad_form(&upsilons[if upsilons.len() == 1 { 0 } else { l }], &s_tilde.column(l).to_vec()))
        .collect()
}
