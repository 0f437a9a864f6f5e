//! Channel generation: i.i.d. Rayleigh downlink channels and the a posteriori
//! aging model `h_k[l] = α_k[l]·h_k[0] + √(1−α²)·V_T*·(m_k ⊙ w_k[l])`.

use std::f64::consts::PI;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{CMatrix, RMatrix};

/// One `CN(0, 1)` draw.
pub fn complex_gaussian(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// K×N_T channel with i.i.d. `CN(0, 1)` entries, so `E{tr(HHᴴ)} = K·N_T`.
pub fn sample_rayleigh(k: usize, nt: usize, rng: &mut impl Rng) -> CMatrix {
    CMatrix::from_fn(k, nt, |_, _| complex_gaussian(rng))
}

/// N_T×(N_F·N_T) oversampled DFT rows with unit norm:
/// `[V_T]_{i,m} = e^{−j2π·i·m/(N_F·N_T)} / √(N_F·N_T)`.
pub fn build_partial_dft(nt: usize, fine: usize) -> CMatrix {
    let n = (fine.max(1) * nt) as f64;
    CMatrix::from_fn(nt, fine.max(1) * nt, |i, m| {
        Complex64::from_polar(1.0 / n.sqrt(), -2.0 * PI * (i * m) as f64 / n)
    })
}

/// Zeroth-order Bessel function of the first kind (Abramowitz & Stegun 9.4.1/9.4.3).
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 3.0 {
        let y = (x / 3.0).powi(2);
        1.0 + y * (-2.2499997
            + y * (1.2656208 + y * (-0.3163866 + y * (0.0444479 + y * (-0.0039444 + y * 0.0002100)))))
    } else {
        let y = 3.0 / ax;
        let f0 = 0.79788456
            + y * (-0.00000077
                + y * (-0.00552740 + y * (-0.00009512 + y * (0.00137237 + y * (-0.00072805 + y * 0.00014476)))));
        let t0 = ax - 0.78539816
            + y * (-0.04166397
                + y * (-0.00003954 + y * (0.00262573 + y * (-0.00054125 + y * (-0.00029333 + y * 0.00013558)))));
        f0 * t0.cos() / ax.sqrt()
    }
}

/// Jakes correlation `α[l] = J0(2π·f_D·T_s·l)` for `l = 1..=len`.
pub fn jakes_alpha(normalized_doppler: f64, len: usize) -> Vec<f64> {
    (1..=len).map(|l| bessel_j0(2.0 * PI * normalized_doppler * l as f64).clamp(0.0, 1.0)).collect()
}

/// Parameters of the first-order Markov aging model for one coherence block.
#[derive(Clone, Debug)]
pub struct AgingModel {
    /// Pilot-phase channel, K×N_T.
    pub h0: CMatrix,
    /// Correlation per user and symbol, K×L, entries in [0, 1].
    pub alpha: Array2<f64>,
    /// Nonnegative innovation amplitudes, K×(N_F·N_T).
    pub m: RMatrix,
    /// N_T×(N_F·N_T) partial DFT.
    pub v_t: CMatrix,
    pub fine: usize,
}

impl AgingModel {
    /// Draws sparse amplitudes `m_k` (a `density` fraction of nonzeros from
    /// `|N(0,1)|`), scaled so the innovation term alone has `E‖h_k‖² = N_T`.
    pub fn generate(
        h0: CMatrix,
        alpha: Array2<f64>,
        fine: usize,
        density: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (k, nt) = (h0.rows(), h0.cols());
        if alpha.nrows() != k {
            return Err(Error::shape(format!("alpha has {} rows for {k} users", alpha.nrows())));
        }
        if alpha.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("aging correlation must lie in [0, 1]".into()));
        }
        let fine = fine.max(1);
        let width = fine * nt;
        let nnz = ((density.clamp(0.0, 1.0) * width as f64).round() as usize).clamp(1, width);
        let mut m = RMatrix::zeros(k, width);
        for user in 0..k {
            let support = rand::seq::index::sample(rng, width, nnz);
            for j in support.iter() {
                let v: f64 = StandardNormal.sample(rng);
                m[(user, j)] = v.abs().max(1e-3);
            }
            // Each column of V_T* has squared norm 1/N_F, so E‖V_T*(m⊙w)‖² = Σm²/N_F.
            let energy: f64 = (0..width).map(|j| m[(user, j)].powi(2)).sum();
            let scale = ((fine * nt) as f64 / energy).sqrt();
            for j in 0..width {
                m[(user, j)] *= scale;
            }
        }
        Ok(AgingModel { h0, alpha, m, v_t: build_partial_dft(nt, fine), fine })
    }

    pub fn users(&self) -> usize {
        self.h0.rows()
    }

    pub fn antennas(&self) -> usize {
        self.h0.cols()
    }

    pub fn symbols(&self) -> usize {
        self.alpha.ncols()
    }

    pub fn beta(&self, user: usize, l: usize) -> f64 {
        (1.0 - self.alpha[(user, l)].powi(2)).max(0.0).sqrt()
    }

    /// Mean channel `H̄[l] = diag(α[:, l])·H[0]`.
    pub fn mean_channel(&self, l: usize) -> CMatrix {
        CMatrix::from_fn(self.users(), self.antennas(), |k, n| self.h0[(k, n)] * self.alpha[(k, l)])
    }

    /// `(V_k, E_k)` for every user.
    pub fn effective(&self) -> Vec<(CMatrix, CMatrix)> {
        (0..self.users()).map(|k| effective_matrices(self.m.row(k), &self.v_t)).collect()
    }

    /// `U = M·V_Tᴴ`, K×N_T.
    pub fn u_matrix(&self) -> CMatrix {
        let m = CMatrix::from_fn(self.m.rows(), self.m.cols(), |r, c| Complex64::new(self.m[(r, c)], 0.0));
        m.matmul(&self.v_t.hermitian())
    }

    /// Draws the true channel of symbol `l` (0-based).
    pub fn sample_aged_channel(&self, l: usize, rng: &mut impl Rng) -> CMatrix {
        let (k, nt) = (self.users(), self.antennas());
        let width = self.v_t.cols();
        let mut h = CMatrix::zeros(k, nt);
        for user in 0..k {
            let alpha = self.alpha[(user, l)];
            let beta = self.beta(user, l);
            let w: Vec<Complex64> = (0..width).map(|_| complex_gaussian(rng)).collect();
            for n in 0..nt {
                let mut innov = Complex64::new(0.0, 0.0);
                for j in 0..width {
                    innov += self.v_t[(n, j)].conj() * (w[j] * self.m[(user, j)]);
                }
                h[(user, n)] = self.h0[(user, n)] * alpha + innov * beta;
            }
        }
        h
    }
}

/// `V_k` (N_F·N_T × N_T) with column `i = m_k ⊙ conj(v_i)`, `v_i` the i-th row
/// of `V_T`, and `E_k = V_kᴴ·V_k`, so that the innovation seen through a
/// transmit vector `x` has variance `β²·xᴴE_k x = β²‖V_k x‖²`.
pub fn effective_matrices(m_k: &[f64], v_t: &CMatrix) -> (CMatrix, CMatrix) {
    let (nt, width) = (v_t.rows(), v_t.cols());
    assert_eq!(m_k.len(), width, "m_k length must equal N_F·N_T");
    let v_k = CMatrix::from_fn(width, nt, |j, i| v_t[(i, j)].conj() * m_k[j]);
    let e_k = v_k.hermitian().matmul(&v_k);
    (v_k, e_k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::testutil::{random_cvec, rng};
    use crate::linalg::{cdot, norm_sqr, quad_form};

    #[test]
    fn rayleigh_moments() {
        let mut r = rng(11);
        let (k, nt, n) = (3, 4, 10_000);
        let mean: f64 = (0..n)
            .map(|_| sample_rayleigh(k, nt, &mut r).frobenius_norm().powi(2) / (k * nt) as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
        let scalar: f64 = (0..n).map(|_| sample_rayleigh(1, 1, &mut r)[(0, 0)].norm_sqr()).sum::<f64>() / n as f64;
        assert!((scalar - 1.0).abs() < 0.05, "{scalar}");
    }

    #[test]
    fn rayleigh_is_deterministic() {
        let a = sample_rayleigh(2, 3, &mut rng(5));
        let b = sample_rayleigh(2, 3, &mut rng(5));
        assert_eq!(a, b);
    }

    #[test]
    fn dft_examples() {
        let v = build_partial_dft(2, 1);
        let s = 0.5f64.sqrt();
        let expect = [[s, s], [s, -s]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((v[(i, j)] - Complex64::new(expect[i][j], 0.0)).norm() < 1e-15);
            }
        }
        let v = build_partial_dft(5, 1);
        let g = v.matmul(&v.hermitian());
        assert!(g.sub(&CMatrix::identity(5)).frobenius_norm() < 1e-12);
        let v = build_partial_dft(4, 2);
        assert_eq!((v.rows(), v.cols()), (4, 8));
        for i in 0..4 {
            assert!((norm_sqr(v.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn effective_matrix_cases() {
        let v = build_partial_dft(4, 1);
        let (_, e) = effective_matrices(&[1.0; 4], &v);
        assert!(e.sub(&CMatrix::identity(4)).frobenius_norm() < 1e-12);
        let (vk, e) = effective_matrices(&[0.0; 4], &v);
        assert_eq!(vk.frobenius_norm(), 0.0);
        assert_eq!(e.frobenius_norm(), 0.0);
        let v = build_partial_dft(3, 2);
        let mut r = rng(9);
        let m: Vec<f64> = (0..6).map(|_| r.random::<f64>()).collect();
        let (vk, e) = effective_matrices(&m, &v);
        let x = random_cvec(&mut r, 3);
        assert!((quad_form(&e, &x) - norm_sqr(&vk.mul_vec(&x))).abs() < 1e-12);
    }

    #[test]
    fn alpha_one_returns_h0() {
        let mut r = rng(3);
        let h0 = sample_rayleigh(2, 4, &mut r);
        let model = AgingModel::generate(h0.clone(), Array2::ones((2, 3)), 2, 0.25, &mut r).unwrap();
        assert_eq!(model.sample_aged_channel(1, &mut r), h0);
    }

    #[test]
    fn aging_sampler_is_deterministic() {
        let mut r = rng(3);
        let h0 = sample_rayleigh(2, 4, &mut r);
        let model = AgingModel::generate(h0, Array2::from_elem((2, 3), 0.9), 2, 0.25, &mut r).unwrap();
        assert_eq!(model.sample_aged_channel(0, &mut rng(8)), model.sample_aged_channel(0, &mut rng(8)));
    }

    #[test]
    fn pure_innovation_covariance() {
        // α = 0, m = 1, N_F = 1: rows are V_T*·w, covariance V_T*·V_Tᵀ = I.
        let nt = 3;
        let mut model = AgingModel {
            h0: CMatrix::zeros(1, nt),
            alpha: Array2::zeros((1, 1)),
            m: RMatrix::from_fn(1, nt, |_, _| 1.0),
            v_t: build_partial_dft(nt, 1),
            fine: 1,
        };
        let expect = model.v_t.conj().matmul(&model.v_t.transpose());
        let mut r = rng(21);
        let n = 20_000;
        let mut cov = CMatrix::zeros(nt, nt);
        for _ in 0..n {
            let h = model.sample_aged_channel(0, &mut r);
            let row = h.row(0);
            for i in 0..nt {
                for j in 0..nt {
                    cov[(i, j)] += row[i] * row[j].conj();
                }
            }
        }
        let cov = cov.scale_real(1.0 / n as f64);
        assert!(cov.sub(&expect).frobenius_norm() < 0.05, "{cov:?}");
        model.alpha[(0, 0)] = 1.0;
        assert_eq!(model.sample_aged_channel(0, &mut r), model.h0);
    }

    #[test]
    fn effective_noise_variance_identity() {
        let mut r = rng(33);
        let (k, nt) = (2, 4);
        let h0 = sample_rayleigh(k, nt, &mut r);
        let alpha = 0.8;
        let model = AgingModel::generate(h0, Array2::from_elem((k, 1), alpha), 2, 0.5, &mut r).unwrap();
        let eff = model.effective();
        let x = random_cvec(&mut r, nt);
        let sigma2: f64 = 0.1;
        let n = 40_000;
        let hbar = model.mean_channel(0);
        for user in 0..k {
            let mut acc = 0.0;
            for _ in 0..n {
                let h = model.sample_aged_channel(0, &mut r);
                let noise = complex_gaussian(&mut r) * sigma2.sqrt();
                let y = cdot(&h.row(user).iter().map(|z| z.conj()).collect::<Vec<_>>(), &x) + noise;
                let nbar = y - cdot(&hbar.row(user).iter().map(|z| z.conj()).collect::<Vec<_>>(), &x);
                acc += nbar.norm_sqr();
            }
            let measured = acc / n as f64;
            let beta2 = 1.0 - alpha * alpha;
            let predicted = beta2 * norm_sqr(&eff[user].0.mul_vec(&x)) + sigma2;
            assert!((measured / predicted - 1.0).abs() < 0.05, "user {user}: {measured} vs {predicted}");
        }
    }

    #[test]
    fn generated_amplitudes_preserve_energy() {
        let mut r = rng(1);
        let h0 = sample_rayleigh(3, 4, &mut r);
        let model = AgingModel::generate(h0, Array2::zeros((3, 1)), 2, 0.25, &mut r).unwrap();
        for k in 0..3 {
            let row = model.m.row(k);
            assert_eq!(row.iter().filter(|&&v| v > 0.0).count(), 2);
            assert!((row.iter().map(|v| v * v).sum::<f64>() - 8.0).abs() < 1e-9);
        }
        let n = 20_000;
        let e: f64 = (0..n).map(|_| norm_sqr(model.sample_aged_channel(0, &mut r).row(0))).sum::<f64>() / n as f64;
        assert!((e / 4.0 - 1.0).abs() < 0.05, "{e}");
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_j0(0.0) - 1.0).abs() < 1e-7);
        assert!((bessel_j0(1.0) - 0.7651976866).abs() < 1e-7);
        assert!((bessel_j0(5.0) + 0.1775967713).abs() < 1e-7);
        let a = jakes_alpha(0.001, 4);
        assert!(a.windows(2).all(|w| w[1] <= w[0]) && a[0] < 1.0);
    }
}
