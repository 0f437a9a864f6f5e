//! Robust CIMMSE precoding under channel aging.
//!
//! With outdated CSI `h0` and the aging statistics (α, β = √(1−α²), E_k),
//! the per-symbol problem is
//!
//! ```text
//! min_{x, t ⪰ 0, δ ⪰ 0}  Σ_k |t_k h̄_kᵀx − s̃_k|² + t_k²(β_k²‖V_k x‖² + σ²),   ‖x‖² = P_T
//! ```
//!
//! Writing `Ψ = η·diag(t)` and `x = η·P·s̃` turns the `x`-step into a closed
//! form and the `δ`-step into the NNLS problem `min s̃ᴴΥs̃`.

use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor, Var};
use crate::channel::AgingModel;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_upper, hermitian_inverse, norm_sqr, real_composite, real_composite_vec, CMatrix, RMatrix};
use crate::modulation::{CirCoefficients, Constellation};
use crate::nnls::{self, NnlsOptions};
use crate::par::{self, Execution};
use crate::slp::{self, KktFeatures};
use crate::slpn::{Regressor, Slpn};
use crate::te::{Amde, Ctx, Linear, Mdi};

/// Floor applied to the per-user receive scaling `t_k = 1/γ_k`.
pub const SCALING_FLOOR: f64 = 1e-9;

/// `P = (H̄ᴴΨ²H̄ + Φ + σ²Σψ²/P_T·I)⁻¹H̄ᴴΨ` with `Φ = Σ_k ψ_k²β_k²E_k`.
pub fn precoder_matrix(h_bar: &CMatrix, psi: &[f64], beta: &[f64], e: &[CMatrix], sigma2: f64, p_t: f64) -> Result<CMatrix> {
    let (k, nt) = (h_bar.rows(), h_bar.cols());
    if psi.len() != k || beta.len() != k || e.len() != k {
        return Err(Error::shape(format!("{k} users but {} ψ, {} β, {} E", psi.len(), beta.len(), e.len())));
    }
    let psi_h = CMatrix::from_fn(k, nt, |r, c| h_bar[(r, c)] * psi[r]);
    let mut a = psi_h.hermitian().matmul(&psi_h);
    for (user, ek) in e.iter().enumerate() {
        let w = (psi[user] * beta[user]).powi(2);
        if w != 0.0 {
            a = a.add(&ek.scale_real(w));
        }
    }
    let psi2: f64 = psi.iter().map(|p| p * p).sum();
    let a = a.add_diag(sigma2 * psi2 / p_t);
    Ok(hermitian_inverse(&a)?.matmul(&psi_h.hermitian()))
}

/// `Υ = I − ΨH̄P`, symmetrized against rounding.
pub fn upsilon_robust(psi: &[f64], h_bar: &CMatrix, p: &CMatrix) -> CMatrix {
    let k = h_bar.rows();
    let hp = h_bar.matmul(p);
    let u = CMatrix::from_fn(k, k, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        Complex64::new(id, 0.0) - hp[(r, c)] * psi[r]
    });
    CMatrix::from_fn(k, k, |r, c| (u[(r, c)] + u[(c, r)].conj()) * 0.5)
}

/// Real metric `M` with `MᵀM = R(Υ)`; a tiny ridge covers singular `Υ`.
pub fn upsilon_metric(u: &CMatrix) -> Result<RMatrix> {
    let r = real_composite(u);
    match cholesky_upper(&r) {
        Ok(m) => Ok(m),
        Err(_) => {
            let n = r.rows();
            let ridge = 1e-12 * (0..n).map(|i| r[(i, i)].abs()).sum::<f64>().max(1.0);
            cholesky_upper(&r.add(&RMatrix::identity(n).scale(ridge)))
        }
    }
}

/// Per-user noise terms `β_k²‖V_k x‖² + σ²`.
fn noise_terms(x: &[Complex64], beta: &[f64], v: &[CMatrix], sigma2: f64) -> Vec<f64> {
    (0..beta.len()).map(|k| beta[k].powi(2) * norm_sqr(&v[k].mul_vec(x)) + sigma2).collect()
}

/// Optimal nonnegative receive scalings (floored) and the resulting MSE.
pub fn optimal_scalings(
    h_bar: &CMatrix,
    x: &[Complex64],
    s_tilde: &[Complex64],
    beta: &[f64],
    v: &[CMatrix],
    sigma2: f64,
) -> (Vec<f64>, f64) {
    let a = h_bar.mul_vec(x);
    let noise = noise_terms(x, beta, v, sigma2);
    let mut mse = 0.0;
    let t: Vec<f64> = (0..a.len())
        .map(|k| {
            let t = ((s_tilde[k].conj() * a[k]).re / (a[k].norm_sqr() + noise[k])).max(SCALING_FLOOR);
            mse += (a[k] * t - s_tilde[k]).norm_sqr() + t * t * noise[k];
            t
        })
        .collect();
    (t, mse)
}

/// Robust MSE of a given transmit vector with the per-user optimal scalings.
pub fn symbol_mse(h_bar: &CMatrix, x: &[Complex64], s_tilde: &[Complex64], beta: &[f64], v: &[CMatrix], sigma2: f64) -> f64 {
    optimal_scalings(h_bar, x, s_tilde, beta, v, sigma2).1
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Keep Ψ at its initial all-ones value (skips the scaling update).
    pub freeze_psi: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { tol: 1e-4, max_iter: 400, freeze_psi: false }
    }
}

/// Alternating-optimization result for one symbol.
#[derive(Clone, Debug)]
pub struct SymbolOracle {
    pub psi: Vec<f64>,
    /// `[δ_μ; δ_ν]`.
    pub delta: Vec<f64>,
    pub x: Vec<Complex64>,
    pub eta: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl SymbolOracle {
    /// True when no recorded MSE exceeds its predecessor beyond rounding.
    pub fn is_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0))
    }
}

/// Per-symbol inputs of the robust problem.
pub struct RobustSymbol<'a> {
    pub h_bar: CMatrix,
    pub beta: Vec<f64>,
    pub v: &'a [CMatrix],
    pub e: &'a [CMatrix],
    pub s: Vec<Complex64>,
    pub cir: &'a CirCoefficients,
    pub l: usize,
    pub sigma2: f64,
    pub p_t: f64,
}

impl RobustSymbol<'_> {
    fn perturbed(&self, delta: &[f64]) -> Vec<Complex64> {
        let k = self.s.len();
        let p = self.cir.perturbation(self.l, &delta[..k], &delta[k..]);
        self.s.iter().zip(&p).map(|(a, b)| a + b).collect()
    }

    fn precoder(&self, psi: &[f64]) -> Result<CMatrix> {
        precoder_matrix(&self.h_bar, psi, &self.beta, self.e, self.sigma2, self.p_t)
    }

    /// `x = η·P·s̃`.
    pub fn transmit(&self, psi: &[f64], delta: &[f64]) -> Result<(Vec<Complex64>, f64)> {
        let z = self.precoder(psi)?.mul_vec(&self.perturbed(delta));
        let e = norm_sqr(&z);
        if !(e > 0.0) {
            return Err(Error::NonPositiveGamma(0.0));
        }
        let eta = (self.p_t / e).sqrt();
        Ok((z.iter().map(|v| v * eta).collect(), eta))
    }

    /// Optimal `δ` for a fixed Ψ.
    pub fn solve_delta(&self, psi: &[f64]) -> Result<Vec<f64>> {
        let p = self.precoder(psi)?;
        let u = upsilon_robust(psi, &self.h_bar, &p);
        let m = upsilon_metric(&u)?;
        let a = m.matmul(&self.cir.lambda(self.l));
        let b = m.mul_vec(&real_composite_vec(&self.s));
        Ok(nnls::solve(&a, &b, NnlsOptions::default())?.ensure_converged()?.delta)
    }

    pub fn oracle(&self, opts: OracleOptions) -> Result<SymbolOracle> {
        let k = self.s.len();
        let mut psi = vec![1.0; k];
        let mut delta = vec![0.0; 2 * k];
        let mut trace = Vec::new();
        let mut converged = false;
        for _ in 0..opts.max_iter {
            let (x, eta) = self.transmit(&psi, &delta)?;
            let st = self.perturbed(&delta);
            let mse = if opts.freeze_psi {
                let t: Vec<f64> = psi.iter().map(|p| p / eta).collect();
                let a = self.h_bar.mul_vec(&x);
                let noise = noise_terms(&x, &self.beta, self.v, self.sigma2);
                (0..k).map(|i| (a[i] * t[i] - st[i]).norm_sqr() + t[i] * t[i] * noise[i]).sum()
            } else {
                let (t, mse) = optimal_scalings(&self.h_bar, &x, &st, &self.beta, self.v, self.sigma2);
                psi = t.iter().map(|t| t * eta).collect();
                mse
            };
            let prev = trace.last().copied();
            trace.push(mse);
            delta = self.solve_delta(&psi)?;
            if let Some(prev) = prev {
                if (prev - mse).abs() < opts.tol {
                    converged = true;
                    break;
                }
            }
        }
        let (x, eta) = self.transmit(&psi, &delta)?;
        Ok(SymbolOracle { psi, delta, x, eta, trace, converged })
    }
}

/// Robust oracle output for a block.
#[derive(Clone, Debug)]
pub struct RobustSolution {
    /// `Ψ*`, K×L.
    pub psi: Array2<f64>,
    /// `D*`, K×L×2.
    pub d: Array3<f64>,
    /// Transmit vectors, N_T×L, each with `‖x‖² = P_T`.
    pub x: CMatrix,
    pub eta: Vec<f64>,
    pub s_tilde: Array2<Complex64>,
    pub traces: Vec<Vec<f64>>,
    /// False when any symbol hit the iteration limit.
    pub converged: bool,
}

impl RobustSolution {
    pub fn is_monotone(&self) -> bool {
        self.traces.iter().all(|t| t.windows(2).all(|w| w[1] <= w[0] + 1e-10 * w[0].abs().max(1.0)))
    }
}

/// Shared per-block precomputation for the robust problem.
pub struct RobustBlock {
    pub v: Vec<CMatrix>,
    pub e: Vec<CMatrix>,
}

impl RobustBlock {
    pub fn new(model: &AgingModel) -> Self {
        let (v, e) = model.effective().into_iter().unzip();
        RobustBlock { v, e }
    }
}

fn symbol_problem<'a>(
    model: &AgingModel,
    blk: &'a RobustBlock,
    s: &Array2<Complex64>,
    cir: &'a CirCoefficients,
    l: usize,
    sigma2: f64,
    p_t: f64,
) -> RobustSymbol<'a> {
    RobustSymbol {
        h_bar: model.mean_channel(l),
        beta: (0..model.users()).map(|k| model.beta(k, l)).collect(),
        v: &blk.v,
        e: &blk.e,
        s: s.column(l).to_vec(),
        cir,
        l,
        sigma2,
        p_t,
    }
}

/// Alternating optimization for every symbol of the block. Symbols that hit
/// the iteration limit keep their last iterate and clear `converged`.
pub fn rcimmse_oracle(
    model: &AgingModel,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    opts: OracleOptions,
    exec: Execution,
) -> Result<RobustSolution> {
    let (k, l_len) = symbols.dim();
    if k != model.users() || l_len != model.symbols() {
        return Err(Error::shape(format!("symbols {k}x{l_len} for a {}x{} aging model", model.users(), model.symbols())));
    }
    let blk = RobustBlock::new(model);
    let s = c.map_symbols(symbols);
    let cir = CirCoefficients::from_symbols(symbols, c);
    let sols = par::try_map_range(exec, l_len, |l| symbol_problem(model, &blk, &s, &cir, l, sigma2, p_t).oracle(opts))?;
    let nt = model.antennas();
    let mut psi = Array2::zeros((k, l_len));
    let mut d = Array3::zeros((k, l_len, 2));
    let mut x = CMatrix::zeros(nt, l_len);
    for (l, sol) in sols.iter().enumerate() {
        for i in 0..k {
            psi[(i, l)] = sol.psi[i];
            d[(i, l, 0)] = sol.delta[i];
            d[(i, l, 1)] = sol.delta[k + i];
        }
        x.set_column(l, &sol.x);
    }
    let converged = sols.iter().all(|s| s.converged);
    if !converged {
        log::warn!("robust oracle hit the iteration limit on some symbols");
    }
    Ok(RobustSolution {
        psi,
        s_tilde: slp::perturbed_symbols(&s, &cir, &d),
        d,
        x,
        eta: sols.iter().map(|s| s.eta).collect(),
        traces: sols.into_iter().map(|s| s.trace).collect(),
        converged,
    })
}

/// Mean per-symbol robust MSE of a block under the aging statistics.
pub fn block_mse(model: &AgingModel, x: &CMatrix, s_tilde: &Array2<Complex64>, sigma2: f64) -> f64 {
    let blk = RobustBlock::new(model);
    let l_len = x.cols();
    (0..l_len)
        .map(|l| {
            let beta: Vec<f64> = (0..model.users()).map(|k| model.beta(k, l)).collect();
            symbol_mse(&model.mean_channel(l), &x.column(l), &s_tilde.column(l).to_vec(), &beta, &blk.v, sigma2)
        })
        .sum::<f64>()
        / l_len as f64
}

/// `Q`, `G` and the replicated RSLPN-A input `X` (K×N_T×L×8).
#[derive(Clone, Debug)]
pub struct RobustInputs {
    /// `[H, U]` stacked on the last axis, K×N_T×2.
    pub q: ndarray::Array3<Complex64>,
    /// `[Re S, Im S, A]`, K×L×3.
    pub g: Array3<f64>,
    pub sigma2: f64,
    /// `[Re Q̃, Im Q̃, G̃, σ²·1]`, K×N_T×L×8.
    pub x: ndarray::Array4<f64>,
}

pub fn build_rslpn_inputs(h: &CMatrix, u: &CMatrix, alpha: &Array2<f64>, s: &Array2<Complex64>, sigma2: f64) -> Result<RobustInputs> {
    let (k, nt) = (h.rows(), h.cols());
    let l_len = s.ncols();
    if u.rows() != k || u.cols() != nt || alpha.dim() != (k, l_len) || s.nrows() != k {
        return Err(Error::shape(format!(
            "H {k}x{nt}, U {}x{}, A {:?}, S {:?}",
            u.rows(),
            u.cols(),
            alpha.dim(),
            s.dim()
        )));
    }
    let q = ndarray::Array3::from_shape_fn((k, nt, 2), |(i, n, j)| if j == 0 { h[(i, n)] } else { u[(i, n)] });
    let g = Array3::from_shape_fn((k, l_len, 3), |(i, l, j)| match j {
        0 => s[(i, l)].re,
        1 => s[(i, l)].im,
        _ => alpha[(i, l)],
    });
    let x = ndarray::Array4::from_shape_fn((k, nt, l_len, 8), |(i, n, l, f)| match f {
        0 | 1 => q[(i, n, f)].re,
        2 | 3 => q[(i, n, f - 2)].im,
        4..=6 => g[(i, l, f - 4)],
        _ => sigma2,
    });
    Ok(RobustInputs { q, g, sigma2, x })
}

/// Network input for a block under an aging model.
pub fn model_inputs(model: &AgingModel, symbols: &Array2<usize>, c: &Constellation, sigma2: f64) -> Result<RobustInputs> {
    build_rslpn_inputs(&model.h0, &model.u_matrix(), &model.alpha, &c.map_symbols(symbols), sigma2)
}

/// Scales each column of Ψ to unit mean. The precoder depends on Ψ only up
/// to a per-symbol scale, so this loses nothing.
pub fn normalize_psi(psi: &Array2<f64>) -> Array2<f64> {
    let mut out = psi.clone();
    for mut col in out.columns_mut() {
        let m = col.mean().unwrap_or(1.0);
        if m > 0.0 {
            col.mapv_inplace(|v| v / m);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RslpnAConfig {
    pub width: usize,
    pub blocks_3d: usize,
    pub blocks_2d: usize,
    pub heads: usize,
}

impl Default for RslpnAConfig {
    fn default() -> Self {
        RslpnAConfig { width: 16, blocks_3d: 2, blocks_2d: 2, heads: 4 }
    }
}

/// The Ψ network: embed → AMDE-3D → MDI over antennas → AMDE-2D → FC → softplus.
#[derive(Clone, Debug)]
pub struct RslpnA {
    pub config: RslpnAConfig,
    pub store: ParamStore,
    embed: Linear,
    blocks_3d: Vec<Amde>,
    pool: Mdi,
    blocks_2d: Vec<Amde>,
    out: Linear,
}

impl RslpnA {
    pub fn new(config: RslpnAConfig, rng: &mut impl Rng) -> Result<Self> {
        let f = config.width;
        if config.heads == 0 || f % config.heads != 0 {
            return Err(Error::Config(format!("width {f} must be a multiple of the head count {}", config.heads)));
        }
        let mut st = ParamStore::new();
        let embed = Linear::new(&mut st, "embed", 8, f, rng);
        let blocks_3d = (0..config.blocks_3d).map(|i| Amde::new(&mut st, &format!("amde3d{i}"), &[1, 2, 3], &[1, 2], f, rng)).collect();
        let pool = Mdi::new(&mut st, "mdi", 2, f, config.heads, f / config.heads, rng);
        let blocks_2d = (0..config.blocks_2d).map(|i| Amde::new(&mut st, &format!("amde2d{i}"), &[1, 2], &[1, 2], f, rng)).collect();
        let out = Linear::new(&mut st, "out", f, 1, rng);
        Ok(RslpnA { config, store: st, embed, blocks_3d, pool, blocks_2d, out })
    }

    /// `N×K×N_T×L×8` → `N×K×L`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 5 || s[4] != 8 {
            return Err(Error::shape(format!("RSLPN-A input {s:?}")));
        }
        let mut h = self.embed.forward(cx, x)?;
        for b in &self.blocks_3d {
            h = b.forward(cx, h)?;
        }
        h = self.pool.forward(cx, h)?;
        for b in &self.blocks_2d {
            h = b.forward(cx, h)?;
        }
        let o = self.out.forward(cx, h)?;
        let o = cx.g.softplus(o);
        cx.g.reshape(o, &[s[0], s[1], s[3]])
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut cx = Ctx::inference(&self.store);
        let xv = cx.input(x.clone());
        let y = self.forward(&mut cx, xv)?;
        Ok(cx.g.value(y).clone())
    }

    pub fn predict_one(&self, inputs: &RobustInputs) -> Result<Array2<f64>> {
        let x = inputs.x.clone().insert_axis(Axis(0)).into_dyn();
        let y = self.predict(&x)?;
        Ok(y.index_axis_move(Axis(0), 0).into_dimensionality().expect("rank 2"))
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": "rslpn-a", "config": self.config, "extra": extra });
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("rslpn-a") {
            return Err(Error::Format("checkpoint does not hold an RSLPN-A".into()));
        }
        let config: RslpnAConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = RslpnA::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        model.store.load_values_from(&store)?;
        Ok((model, meta["extra"].clone()))
    }
}

impl Regressor for RslpnA {
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward_batch(&self, cx: &mut Ctx, inputs: &[Var]) -> Result<Var> {
        self.forward(cx, inputs[0])
    }
}

/// Stacks per-block inputs into an `N×K×N_T×L×8` batch.
pub fn stack_inputs(inputs: &[RobustInputs]) -> Result<Tensor> {
    let views: Vec<_> = inputs.iter().map(|i| i.x.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.into_dyn())
}

/// Stacks K×L matrices into an `N×K×L` batch.
pub fn stack_psi(psi: &[Array2<f64>]) -> Result<Tensor> {
    let views: Vec<_> = psi.iter().map(|p| p.view().insert_axis(Axis(0))).collect();
    Ok(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.into_dyn())
}

/// Closed forms of a block at a given Ψ: precoders and `Υ[l]`.
pub fn block_closed_forms(model: &AgingModel, psi: &Array2<f64>, sigma2: f64, p_t: f64) -> Result<(Vec<CMatrix>, Vec<CMatrix>)> {
    let blk = RobustBlock::new(model);
    let mut ps = Vec::with_capacity(model.symbols());
    let mut us = Vec::with_capacity(model.symbols());
    for l in 0..model.symbols() {
        let h_bar = model.mean_channel(l);
        let col: Vec<f64> = psi.column(l).to_vec();
        let beta: Vec<f64> = (0..model.users()).map(|k| model.beta(k, l)).collect();
        let p = precoder_matrix(&h_bar, &col, &beta, &blk.e, sigma2, p_t)?;
        us.push(upsilon_robust(&col, &h_bar, &p));
        ps.push(p);
    }
    Ok((ps, us))
}

/// Features and optimal perturbations for RSLPN-B at a given Ψ.
pub fn stage_b_sample(
    model: &AgingModel,
    symbols: &Array2<usize>,
    c: &Constellation,
    psi: &Array2<f64>,
    sigma2: f64,
    p_t: f64,
) -> Result<(KktFeatures, Array3<f64>)> {
    let (_, us) = block_closed_forms(model, psi, sigma2, p_t)?;
    let feats = slp::kkt_features(&us, symbols, c)?;
    let s = c.map_symbols(symbols);
    let cir = CirCoefficients::from_symbols(symbols, c);
    let (k, l_len) = symbols.dim();
    let mut d = Array3::zeros((k, l_len, 2));
    for (l, u) in us.iter().enumerate() {
        let m = upsilon_metric(u)?;
        let (a, b) = slp::perturbation_problem(&m, &s, &cir, l);
        let sol = nnls::solve(&a, &b, NnlsOptions::default())?.ensure_converged()?;
        for i in 0..k {
            d[(i, l, 0)] = sol.delta[i];
            d[(i, l, 1)] = sol.delta[k + i];
        }
    }
    Ok((feats, d))
}

/// Output of the learned robust precoder for one block.
#[derive(Clone, Debug)]
pub struct RobustDlOutput {
    pub psi: Array2<f64>,
    pub d_hat: Array3<f64>,
    pub s_tilde: Array2<Complex64>,
    /// Transmit vectors, N_T×L, each with `‖x‖² = P_T`.
    pub x: CMatrix,
    pub eta: Vec<f64>,
}

/// Finishes the robust pipeline from Ψ and a raw perturbation tensor.
pub fn robust_finish(
    model: &AgingModel,
    symbols: &Array2<usize>,
    c: &Constellation,
    psi: &Array2<f64>,
    d_raw: &Array3<f64>,
    precoders: &[CMatrix],
    upsilons: &[CMatrix],
    p_t: f64,
    refine: bool,
) -> Result<RobustDlOutput> {
    let s = c.map_symbols(symbols);
    let cir = CirCoefficients::from_symbols(symbols, c);
    let d_hat = d_raw.mapv(|v| v.max(0.0));
    let s_tilde = if refine { slp::post_refine(upsilons, &s, &cir, &d_hat).1 } else { slp::perturbed_symbols(&s, &cir, &d_hat) };
    let refs: Vec<&CMatrix> = precoders.iter().collect();
    let blk = slp::precode_closed_form(&refs, &s_tilde, p_t)?;
    let _ = model;
    Ok(RobustDlOutput { psi: psi.clone(), d_hat, s_tilde, x: blk.x, eta: blk.gamma })
}

/// The two-stage learned robust precoder for one block.
pub fn rcimmse_dl(
    model: &AgingModel,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    net_a: &RslpnA,
    net_b: &Slpn,
    refine: bool,
) -> Result<RobustDlOutput> {
    let psi = net_a.predict_one(&model_inputs(model, symbols, c, sigma2)?)?;
    let (ps, us) = block_closed_forms(model, &psi, sigma2, p_t)?;
    let feats = slp::kkt_features(&us, symbols, c)?;
    let d = net_b.predict_one(&feats)?;
    robust_finish(model, symbols, c, &psi, &d, &ps, &us, p_t, refine)
}

/// Batched version of [`rcimmse_dl`]: each network runs once over all blocks.
pub fn rcimmse_dl_batch(
    blocks: &[(AgingModel, Array2<usize>)],
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    net_a: &RslpnA,
    net_b: &Slpn,
    refine: bool,
    exec: Execution,
) -> Result<Vec<RobustDlOutput>> {
    let inputs = par::try_map_slice(exec, blocks, |(m, sym)| model_inputs(m, sym, c, sigma2))?;
    let psi = net_a.predict(&stack_inputs(&inputs)?)?;
    let forms = par::try_map_range(exec, blocks.len(), |i| {
        let p: Array2<f64> = psi.slice(s![i, .., ..]).to_owned().into_dimensionality().expect("rank 2");
        let (ps, us) = block_closed_forms(&blocks[i].0, &p, sigma2, p_t)?;
        let feats = slp::kkt_features(&us, &blocks[i].1, c)?;
        Ok::<_, Error>((p, ps, us, feats))
    })?;
    let feats: Vec<KktFeatures> = forms.iter().map(|f| f.3.clone()).collect();
    let (b, cc) = crate::slpn::stack_features(&feats)?;
    let d = net_b.predict(&b, &cc)?;
    par::try_map_range(exec, blocks.len(), |i| {
        let di: Array3<f64> = d.slice(s![i, .., .., ..]).to_owned();
        let (p, ps, us, _) = &forms[i];
        robust_finish(&blocks[i].0, &blocks[i].1, c, p, &di, ps, us, p_t, refine)
    })
}

/// Zero-filled `N×K×L` tensor, handy for shape checks.
pub fn zeros_psi(n: usize, k: usize, l: usize) -> Tensor {
    ArrayD::zeros(IxDyn(&[n, k, l]))
}
