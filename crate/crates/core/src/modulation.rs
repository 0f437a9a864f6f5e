//! Constellations, constructive-interference-region (CIR) boundary
//! directions, ML demodulation and symbol error counting.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModulationKind {
    Psk,
    Qam,
}

/// A modulation scheme such as `qpsk`, `8psk` or `16qam`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Modulation {
    pub kind: ModulationKind,
    pub order: usize,
}

impl Modulation {
    pub const QPSK: Modulation = Modulation { kind: ModulationKind::Psk, order: 4 };

    pub fn psk(order: usize) -> Self {
        Modulation { kind: ModulationKind::Psk, order }
    }

    pub fn qam(order: usize) -> Self {
        Modulation { kind: ModulationKind::Qam, order }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.kind, self.order) {
            (ModulationKind::Psk, 2) => write!(f, "bpsk"),
            (ModulationKind::Psk, 4) => write!(f, "qpsk"),
            (ModulationKind::Psk, m) => write!(f, "{m}psk"),
            (ModulationKind::Qam, m) => write!(f, "{m}qam"),
        }
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Config(format!("unknown modulation '{s}'"));
        match s.as_str() {
            "bpsk" => return Ok(Modulation::psk(2)),
            "qpsk" => return Ok(Modulation::psk(4)),
            _ => {}
        }
        let (digits, kind) = if let Some(d) = s.strip_suffix("psk") {
            (d.trim_end_matches('-'), ModulationKind::Psk)
        } else if let Some(d) = s.strip_suffix("qam") {
            (d.trim_end_matches('-'), ModulationKind::Qam)
        } else {
            return Err(bad());
        };
        let order = digits.parse().map_err(|_| bad())?;
        Ok(Modulation { kind, order })
    }
}

impl TryFrom<String> for Modulation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Modulation> for String {
    fn from(m: Modulation) -> String {
        m.to_string()
    }
}

/// Constellation points with the two CIR boundary directions of each point.
#[derive(Clone, Debug)]
pub struct Constellation {
    pub modulation: Modulation,
    pub points: Vec<Complex64>,
    /// `(μ, ν)` per point. A zero direction means the point cannot move that way.
    pub boundary: Vec<(Complex64, Complex64)>,
}

impl Constellation {
    pub fn new(modulation: Modulation) -> Result<Self> {
        let m = modulation.order;
        let points = match modulation.kind {
            ModulationKind::Psk => {
                if m < 2 || !m.is_power_of_two() {
                    return Err(Error::UnsupportedOrder { kind: "PSK", order: m });
                }
                (0..m).map(|i| Complex64::from_polar(1.0, (2 * i + 1) as f64 * PI / m as f64)).collect()
            }
            ModulationKind::Qam => {
                if !matches!(m, 4 | 16 | 64) {
                    return Err(Error::UnsupportedOrder { kind: "QAM", order: m });
                }
                let side = (m as f64).sqrt().round() as usize;
                let scale = (2.0 * (m as f64 - 1.0) / 3.0).sqrt();
                let level = |i: usize| (2 * i) as f64 - (side as f64 - 1.0);
                (0..m)
                    .map(|i| Complex64::new(level(i % side), level(i / side)) / scale)
                    .collect()
            }
        };
        let mut c = Constellation { modulation, points, boundary: Vec::new() };
        c.boundary = cir_boundaries(&c);
        Ok(c)
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn is_psk(&self) -> bool {
        self.modulation.kind == ModulationKind::Psk
    }

    /// Uniformly random K×L block of symbol indices.
    pub fn random_symbols(&self, k: usize, l: usize, rng: &mut impl Rng) -> Array2<usize> {
        let m = self.order();
        Array2::from_shape_fn((k, l), |_| rng.random_range(0..m))
    }

    pub fn map_symbols(&self, idx: &Array2<usize>) -> Array2<Complex64> {
        idx.mapv(|i| self.points[i])
    }

    /// Column `l` of the mapped block, i.e. the symbol vector `s[l]`.
    pub fn symbol_vector(&self, idx: &Array2<usize>, l: usize) -> Vec<Complex64> {
        idx.column(l).iter().map(|&i| self.points[i]).collect()
    }
}

/// Boundary directions of the CIR of every point.
///
/// PSK point at angle φ: `μ = e^{j(φ+π/M)}`, `ν = e^{j(φ−π/M)}`, the two
/// decision-boundary directions. QAM: `μ` is the outward real axis (±1) when
/// the real coordinate sits on the grid edge, `ν` the outward imaginary axis
/// (±j) likewise, and 0 otherwise.
pub fn cir_boundaries(c: &Constellation) -> Vec<(Complex64, Complex64)> {
    match c.modulation.kind {
        ModulationKind::Psk => {
            let m = c.order() as f64;
            (0..c.order())
                .map(|i| {
                    let phi = (2 * i + 1) as f64 * PI / m;
                    (Complex64::from_polar(1.0, phi + PI / m), Complex64::from_polar(1.0, phi - PI / m))
                })
                .collect()
        }
        ModulationKind::Qam => {
            let max_re = c.points.iter().map(|p| p.re).fold(f64::MIN, f64::max);
            let max_im = c.points.iter().map(|p| p.im).fold(f64::MIN, f64::max);
            let edge = |x: f64, max: f64| {
                if (x - max).abs() < 1e-12 {
                    1.0
                } else if (x + max).abs() < 1e-12 {
                    -1.0
                } else {
                    0.0
                }
            };
            c.points
                .iter()
                .map(|p| (Complex64::new(edge(p.re, max_re), 0.0), Complex64::new(0.0, edge(p.im, max_im))))
                .collect()
        }
    }
}

/// Index of the nearest point to `y/γ̄`; near-exact ties go to the lowest index.
pub fn demodulate(y: Complex64, gamma_bar: f64, c: &Constellation) -> usize {
    let z = y / gamma_bar;
    let dist: Vec<f64> = c.points.iter().map(|p| (z - p).norm_sqr()).collect();
    let best = dist.iter().cloned().fold(f64::INFINITY, f64::min);
    let slack = best * 1e-12 + 1e-300;
    dist.iter().position(|&d| d <= best + slack).unwrap_or(0)
}

/// Phase-only decision for PSK (ignores any real positive receive scaling).
pub fn demodulate_phase(y: Complex64, c: &Constellation) -> usize {
    if y.norm() == 0.0 {
        return 0;
    }
    demodulate(y / y.norm(), 1.0, c)
}

/// Fraction of entries where `decided` differs from `sent`.
pub fn symbol_error_rate(sent: &Array2<usize>, decided: &Array2<usize>) -> Result<f64> {
    if sent.dim() != decided.dim() {
        return Err(Error::shape(format!("sent {:?} vs decided {:?}", sent.dim(), decided.dim())));
    }
    if sent.is_empty() {
        return Ok(0.0);
    }
    let errors = sent.iter().zip(decided.iter()).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / sent.len() as f64)
}

/// Per-user, per-symbol CIR directions for a block of symbols.
#[derive(Clone, Debug)]
pub struct CirCoefficients {
    pub mu: Array2<Complex64>,
    pub nu: Array2<Complex64>,
}

impl CirCoefficients {
    pub fn from_symbols(idx: &Array2<usize>, c: &Constellation) -> Self {
        CirCoefficients { mu: idx.mapv(|i| c.boundary[i].0), nu: idx.mapv(|i| c.boundary[i].1) }
    }

    pub fn users(&self) -> usize {
        self.mu.nrows()
    }

    pub fn symbols(&self) -> usize {
        self.mu.ncols()
    }

    pub fn mu_col(&self, l: usize) -> Vec<Complex64> {
        self.mu.column(l).to_vec()
    }

    pub fn nu_col(&self, l: usize) -> Vec<Complex64> {
        self.nu.column(l).to_vec()
    }

    /// Real 2K×2K matrix `[[diag Re μ, diag Re ν], [diag Im μ, diag Im ν]]`.
    pub fn lambda(&self, l: usize) -> RMatrix {
        let k = self.users();
        let mut lam = RMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            let (mu, nu) = (self.mu[(i, l)], self.nu[(i, l)]);
            lam[(i, i)] = mu.re;
            lam[(i, k + i)] = nu.re;
            lam[(k + i, i)] = mu.im;
            lam[(k + i, k + i)] = nu.im;
        }
        lam
    }

    /// `Λ_μ δ_μ + Λ_ν δ_ν` for symbol `l`, with `delta = [δ_μ; δ_ν]`.
    pub fn perturbation(&self, l: usize, delta_mu: &[f64], delta_nu: &[f64]) -> Vec<Complex64> {
        (0..self.users())
            .map(|i| self.mu[(i, l)] * delta_mu[i] + self.nu[(i, l)] * delta_nu[i])
            .collect()
    }

    pub fn permute_users(&self, perm: &[usize]) -> Self {
        let k = self.users();
        CirCoefficients {
            mu: Array2::from_shape_fn((k, self.symbols()), |(i, l)| self.mu[(perm[i], l)]),
            nu: Array2::from_shape_fn((k, self.symbols()), |(i, l)| self.nu[(perm[i], l)]),
        }
    }
}
