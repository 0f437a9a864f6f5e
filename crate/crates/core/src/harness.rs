//! Dataset generation, Monte-Carlo evaluation and runtime measurement.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::channel::{build_partial_dft, complex_gaussian, sample_rayleigh, AgingModel};
use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, CMatrix, RMatrix};
use crate::modulation::{demodulate, demodulate_phase, CirCoefficients, Constellation, Modulation};
use crate::nnls;
use crate::par::{self, Execution};
use crate::robust::{self, OracleOptions, RslpnA, RslpnAConfig};
use crate::slp::{self, Criterion, KktFeatures, SlpSolution};
use crate::slpn::{self, Batchable, EpochLog, Slpn, SlpnConfig, SlpnDataset, TrainConfig};

const MAGIC: &[u8; 4] = b"SLPD";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;

/// Maximum fraction of samples an oracle failure may drop.
pub const MAX_SKIP_RATE: f64 = 1e-3;

/// One array of an SLPD file.
#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(ArrayD<f64>),
    U64(ArrayD<u64>),
}

/// Named arrays in the SLPD binary layout: magic, version, count, then per
/// array its name, dtype code, rank, dims and a row-major little-endian payload.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ArrayFile {
    pub arrays: BTreeMap<String, ArrayData>,
}

impl ArrayFile {
    pub fn insert_f64(&mut self, name: &str, a: ArrayD<f64>) {
        self.arrays.insert(name.to_string(), ArrayData::F64(a));
    }

    pub fn insert_u64(&mut self, name: &str, a: ArrayD<u64>) {
        self.arrays.insert(name.to_string(), ArrayData::U64(a));
    }

    pub fn f64(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.arrays.get(name) {
            Some(ArrayData::F64(a)) => Ok(a),
            _ => Err(Error::Format(format!("missing f64 array '{name}'"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<&ArrayD<u64>> {
        match self.arrays.get(name) {
            Some(ArrayData::U64(a)) => Ok(a),
            _ => Err(Error::Format(format!("missing u64 array '{name}'"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, data) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = match data {
                ArrayData::F64(a) => {
                    out.push(DTYPE_F64);
                    a.shape().to_vec()
                }
                ArrayData::U64(a) => {
                    out.push(DTYPE_U64);
                    a.shape().to_vec()
                }
            };
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match data {
                ArrayData::F64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                ArrayData::U64(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad SLPD magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SLPD version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let mut dtype = [0u8; 1];
            read_exact(&mut r, &mut dtype)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let data = match dtype[0] {
                DTYPE_F64 => {
                    let v = (0..n).map(|_| read_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
                    ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&shape), v).map_err(|e| Error::Format(e.to_string()))?)
                }
                DTYPE_U64 => {
                    let v = (0..n).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
                    ArrayData::U64(ArrayD::from_shape_vec(IxDyn(&shape), v).map_err(|e| Error::Format(e.to_string()))?)
                }
                d => return Err(Error::Format(format!("unknown dtype code {d}"))),
            };
            arrays.insert(name, data);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        Ok(ArrayFile { arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("truncated SLPD file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Cizf,
    Cimmse,
    Robust,
}

/// Noise variance for an SNR in dB under total power `p_t`.
pub fn snr_to_sigma2(snr_db: f64, p_t: f64) -> f64 {
    p_t / 10f64.powf(snr_db / 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenario: Scenario,
    pub k: usize,
    pub nt: usize,
    pub l: usize,
    pub modulation: Modulation,
    pub p_t: f64,
    /// SNR grid in dB, cycled over samples (unused for CIZF).
    pub snr_db: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Aging correlation shared by every user and symbol.
    pub alpha: f64,
    /// Fraction of nonzero innovation amplitudes.
    pub density: f64,
    /// Angular oversampling `N_F` of the partial DFT.
    pub fine: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenario: Scenario::Cizf,
            k: 4,
            nt: 4,
            l: 16,
            modulation: Modulation::QPSK,
            p_t: 1.0,
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            n_train: 2000,
            n_test: 500,
            seed: 0,
            alpha: 0.98,
            density: 0.25,
            fine: 1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.nt == 0 || self.l == 0 || self.n_train == 0 {
            return Err(Error::Config("K, N_T, L and the training count must be positive".into()));
        }
        if self.k > self.nt {
            return Err(Error::Config(format!("K = {} exceeds N_T = {}", self.k, self.nt)));
        }
        if !(self.p_t > 0.0) {
            return Err(Error::Config("P_T must be positive".into()));
        }
        if self.scenario != Scenario::Cizf && self.snr_db.is_empty() {
            return Err(Error::Config("SNR grid is empty".into()));
        }
        if self.scenario == Scenario::Robust && !Constellation::new(self.modulation)?.is_psk() {
            return Err(Error::Config("robust precoding supports PSK only".into()));
        }
        Constellation::new(self.modulation)?;
        Ok(())
    }

    fn sigma2(&self, index: usize) -> f64 {
        match self.scenario {
            Scenario::Cizf => 0.0,
            _ => snr_to_sigma2(self.snr_db[index % self.snr_db.len()], self.p_t),
        }
    }
}

/// Dataset manifest written next to the array files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetConfig,
    pub train_count: usize,
    pub test_count: usize,
    pub skipped: usize,
}

/// Per-sample RNG: one ChaCha stream per sample index.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index);
    r
}

/// One labeled block.
#[derive(Clone, Debug)]
pub struct Sample {
    pub h: CMatrix,
    pub symbols: Array2<usize>,
    pub sigma2: f64,
    /// Oracle perturbations, K×L×2.
    pub d: Array3<f64>,
    /// KKT features (perfect-CSI scenarios).
    pub features: Option<KktFeatures>,
    /// Aging model and oracle Ψ* (robust scenario).
    pub aging: Option<AgingModel>,
    pub psi: Option<Array2<f64>>,
}

/// True when every symbol's δ satisfies the NNLS KKT conditions.
pub fn certify(metric: &RMatrix, s: &Array2<Complex64>, cir: &CirCoefficients, d: &Array3<f64>) -> bool {
    let k = s.nrows();
    (0..s.ncols()).all(|l| {
        let (a, b) = slp::perturbation_problem(metric, s, cir, l);
        let delta: Vec<f64> = (0..2 * k).map(|i| if i < k { d[(i, l, 0)] } else { d[(i - k, l, 1)] }).collect();
        let scale = a.tr_mul_vec(&b).iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let (stat, slack) = nnls::kkt_residuals(&a, &b, &delta);
        stat <= 1e-8 * scale && slack <= 1e-8 * scale
    })
}

fn robust_certified(aging: &AgingModel, s: &Array2<Complex64>, cir: &CirCoefficients, psi: &Array2<f64>, d: &Array3<f64>, sigma2: f64, p_t: f64) -> Result<bool> {
    let (_, us) = robust::block_closed_forms(aging, psi, sigma2, p_t)?;
    for (l, u) in us.iter().enumerate() {
        let m = robust::upsilon_metric(u)?;
        if !certify(&m, &s.slice(s![.., l..l + 1]).to_owned(), &cir_column(cir, l), &d.slice(s![.., l..l + 1, ..]).to_owned()) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn cir_column(cir: &CirCoefficients, l: usize) -> CirCoefficients {
    CirCoefficients {
        mu: cir.mu.slice(s![.., l..l + 1]).to_owned(),
        nu: cir.nu.slice(s![.., l..l + 1]).to_owned(),
    }
}

/// Generates and labels one sample; `Ok(None)` marks a certification failure.
pub fn generate_sample(cfg: &DatasetConfig, index: usize, exec: Execution) -> Result<Option<Sample>> {
    let c = Constellation::new(cfg.modulation)?;
    let mut r = substream(cfg.seed, index as u64);
    let h = sample_rayleigh(cfg.k, cfg.nt, &mut r);
    let symbols = c.random_symbols(cfg.k, cfg.l, &mut r);
    let sigma2 = cfg.sigma2(index);
    let s = c.map_symbols(&symbols);
    let cir = CirCoefficients::from_symbols(&symbols, &c);
    match cfg.scenario {
        Scenario::Cizf | Scenario::Cimmse => {
            let criterion = if cfg.scenario == Scenario::Cizf { Criterion::Zf } else { Criterion::Mmse { sigma2 } };
            let sol = match criterion {
                Criterion::Zf => slp::cizf_optimal(&h, &symbols, &c, cfg.p_t, exec),
                Criterion::Mmse { sigma2 } => slp::cimmse_optimal(&h, &symbols, &c, cfg.p_t, sigma2, exec),
            };
            let sol: SlpSolution = match sol {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("sample {index}: oracle failed: {e}");
                    return Ok(None);
                }
            };
            if !certify(&criterion.nnls_metric(&h, cfg.p_t)?, &s, &cir, &sol.d) {
                log::warn!("sample {index}: KKT certification failed");
                return Ok(None);
            }
            let u = criterion.upsilon(&h, cfg.p_t)?;
            let features = slp::kkt_features(&[u], &symbols, &c)?;
            Ok(Some(Sample { h, symbols, sigma2, d: sol.d, features: Some(features), aging: None, psi: None }))
        }
        Scenario::Robust => {
            let aging = AgingModel::generate(h.clone(), Array2::from_elem((cfg.k, cfg.l), cfg.alpha), cfg.fine, cfg.density, &mut r)?;
            let sol = match robust::rcimmse_oracle(&aging, &symbols, &c, cfg.p_t, sigma2, OracleOptions::default(), exec) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("sample {index}: robust oracle failed: {e}");
                    return Ok(None);
                }
            };
            if !robust_certified(&aging, &s, &cir, &sol.psi, &sol.d, sigma2, cfg.p_t)? {
                log::warn!("sample {index}: KKT certification failed");
                return Ok(None);
            }
            Ok(Some(Sample { h, symbols, sigma2, d: sol.d, features: None, aging: Some(aging), psi: Some(sol.psi) }))
        }
    }
}

/// Generates `n` samples starting at substream `offset`; returns the kept
/// samples and the skip count.
pub fn generate_split(cfg: &DatasetConfig, offset: usize, n: usize, exec: Execution) -> Result<(Vec<Sample>, usize)> {
    let out = par::try_map_range(exec, n, |i| generate_sample(cfg, offset + i, Execution::Sequential))?;
    let skipped = out.iter().filter(|s| s.is_none()).count();
    Ok((out.into_iter().flatten().collect(), skipped))
}

fn stack<T: Clone + Default, const N: usize>(items: &[ndarray::Array<T, ndarray::Dim<[usize; N]>>]) -> Result<ArrayD<T>>
where
    ndarray::Dim<[usize; N]>: ndarray::Dimension,
{
    let views: Vec<_> = items.iter().map(|a| a.view().insert_axis(Axis(0))).collect();
    if views.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))?.into_dyn())
}

fn cmatrix_to_arrays(ms: &[CMatrix]) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
    let re: Vec<Array2<f64>> = ms.iter().map(|m| Array2::from_shape_fn((m.rows(), m.cols()), |(i, j)| m[(i, j)].re)).collect();
    let im: Vec<Array2<f64>> = ms.iter().map(|m| Array2::from_shape_fn((m.rows(), m.cols()), |(i, j)| m[(i, j)].im)).collect();
    Ok((stack(&re)?, stack(&im)?))
}

/// Serializes a split.
pub fn samples_to_file(samples: &[Sample]) -> Result<ArrayFile> {
    let mut f = ArrayFile::default();
    let hs: Vec<CMatrix> = samples.iter().map(|s| s.h.clone()).collect();
    let (re, im) = cmatrix_to_arrays(&hs)?;
    f.insert_f64("h_re", re);
    f.insert_f64("h_im", im);
    let sym: Vec<Array2<u64>> = samples.iter().map(|s| s.symbols.mapv(|v| v as u64)).collect();
    f.insert_u64("symbols", stack(&sym)?);
    f.insert_f64("sigma2", Array1::from_iter(samples.iter().map(|s| s.sigma2)).into_dyn());
    let d: Vec<Array3<f64>> = samples.iter().map(|s| s.d.clone()).collect();
    f.insert_f64("d", stack(&d)?);
    if samples.iter().all(|s| s.features.is_some()) {
        let feats: Vec<KktFeatures> = samples.iter().map(|s| s.features.clone().unwrap()).collect();
        let (b, c) = slpn::stack_features(&feats)?;
        f.insert_f64("b", b);
        f.insert_f64("c", c);
    }
    if samples.iter().all(|s| s.aging.is_some() && s.psi.is_some()) {
        let psi: Vec<Array2<f64>> = samples.iter().map(|s| s.psi.clone().unwrap()).collect();
        f.insert_f64("psi", stack(&psi)?);
        let m: Vec<Array2<f64>> = samples
            .iter()
            .map(|s| {
                let m = &s.aging.as_ref().unwrap().m;
                Array2::from_shape_fn((m.rows(), m.cols()), |(i, j)| m[(i, j)])
            })
            .collect();
        f.insert_f64("m", stack(&m)?);
        let a: Vec<Array2<f64>> = samples.iter().map(|s| s.aging.as_ref().unwrap().alpha.clone()).collect();
        f.insert_f64("alpha", stack(&a)?);
    }
    Ok(f)
}

/// Rebuilds samples from a split file.
pub fn samples_from_file(f: &ArrayFile, cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    let (re, im) = (f.f64("h_re")?, f.f64("h_im")?);
    let sym = f.u64("symbols")?;
    let sigma2 = f.f64("sigma2")?;
    let d = f.f64("d")?;
    let n = re.shape()[0];
    let b = f.f64("b").ok();
    let c = f.f64("c").ok();
    let psi = f.f64("psi").ok();
    let m = f.f64("m").ok();
    let alpha = f.f64("alpha").ok();
    (0..n)
        .map(|i| {
            let (k, nt) = (re.shape()[1], re.shape()[2]);
            let h = CMatrix::from_fn(k, nt, |r, col| Complex64::new(re[[i, r, col]], im[[i, r, col]]));
            let symbols = sym.index_axis(Axis(0), i).mapv(|v| v as usize).into_dimensionality().map_err(|e| Error::Format(e.to_string()))?;
            let features = match (b, c) {
                (Some(b), Some(c)) => Some(KktFeatures::from_real(
                    &b.index_axis(Axis(0), i).to_owned().into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                    &c.index_axis(Axis(0), i).to_owned().into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                )),
                _ => None,
            };
            let aging = match (m, alpha) {
                (Some(m), Some(alpha)) => {
                    let mi = m.index_axis(Axis(0), i);
                    Some(AgingModel {
                        h0: h.clone(),
                        alpha: alpha.index_axis(Axis(0), i).to_owned().into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                        m: RMatrix::from_fn(mi.shape()[0], mi.shape()[1], |r, col| mi[[r, col]]),
                        v_t: build_partial_dft(nt, cfg.fine.max(1)),
                        fine: cfg.fine.max(1),
                    })
                }
                _ => None,
            };
            Ok(Sample {
                h,
                symbols,
                sigma2: sigma2[[i]],
                d: d.index_axis(Axis(0), i).to_owned().into_dimensionality().map_err(|e| Error::Format(e.to_string()))?,
                features,
                aging,
                psi: psi.map(|p| p.index_axis(Axis(0), i).to_owned().into_dimensionality()).transpose().map_err(|e| Error::Format(e.to_string()))?,
            })
        })
        .collect()
}

/// A generated dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generates, labels and certifies a dataset. Train samples use substreams
/// `0..n_train`, test samples `n_train..n_train + n_test`.
pub fn gen_dataset(cfg: &DatasetConfig, exec: Execution) -> Result<Dataset> {
    cfg.validate()?;
    let (train, s1) = generate_split(cfg, 0, cfg.n_train, exec)?;
    let (test, s2) = generate_split(cfg, cfg.n_train, cfg.n_test, exec)?;
    let skipped = s1 + s2;
    let total = cfg.n_train + cfg.n_test;
    if skipped as f64 > MAX_SKIP_RATE * total as f64 {
        return Err(Error::Config(format!("{skipped} of {total} samples failed labeling")));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let manifest = Manifest {
        format: "SLPD".into(),
        version: VERSION,
        config: cfg.clone(),
        train_count: train.len(),
        test_count: test.len(),
        skipped,
    };
    Ok(Dataset { manifest, train, test })
}

impl Dataset {
    /// Writes `manifest.json`, `train.slpd` and (if non-empty) `test.slpd`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        samples_to_file(&self.train)?.write(&dir.join("train.slpd"))?;
        if !self.test.is_empty() {
            samples_to_file(&self.test)?.write(&dir.join("test.slpd"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let train = samples_from_file(&ArrayFile::read(&dir.join("train.slpd"))?, &manifest.config)?;
        let test_path = dir.join("test.slpd");
        let test = if test_path.exists() { samples_from_file(&ArrayFile::read(&test_path)?, &manifest.config)? } else { Vec::new() };
        if train.len() != manifest.train_count || test.len() != manifest.test_count {
            return Err(Error::Format("sample counts disagree with the manifest".into()));
        }
        Ok(Dataset { manifest, train, test })
    }
}

/// `(B, C) → D*` training set from perfect-CSI samples.
pub fn slpn_dataset(samples: &[Sample]) -> Result<SlpnDataset> {
    let feats: Vec<KktFeatures> = samples
        .iter()
        .map(|s| s.features.clone().ok_or_else(|| Error::Config("sample has no KKT features".into())))
        .collect::<Result<_>>()?;
    let (b, c) = slpn::stack_features(&feats)?;
    let d: Vec<Array3<f64>> = samples.iter().map(|s| s.d.clone()).collect();
    SlpnDataset::new(b, c, slpn::stack_labels(&d)?)
}

/// Trains an SLPN on a perfect-CSI dataset.
pub fn train_slpn(
    data: &Dataset,
    config: SlpnConfig,
    train_cfg: &TrainConfig,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<(Slpn, Vec<EpochLog>)> {
    let train = slpn_dataset(&data.train)?;
    let test = if data.test.is_empty() { None } else { Some(slpn_dataset(&data.test)?) };
    let mut model = Slpn::new(config, rng);
    let logs = slpn::train(&mut model, &train, test.as_ref(), train_cfg, rng, exec)?;
    Ok((model, logs))
}

fn aging_of(s: &Sample) -> Result<&AgingModel> {
    s.aging.as_ref().ok_or_else(|| Error::Config("sample has no aging model".into()))
}

/// RSLPN-A training set: network inputs and unit-mean Ψ* targets.
pub fn rslpn_a_data(samples: &[Sample], c: &Constellation, exec: Execution) -> Result<Batchable> {
    let inputs = par::try_map_slice(exec, samples, |s| robust::model_inputs(aging_of(s)?, &s.symbols, c, s.sigma2))?;
    let psi: Vec<Array2<f64>> = samples
        .iter()
        .map(|s| s.psi.as_ref().map(robust::normalize_psi).ok_or_else(|| Error::Config("sample has no Ψ label".into())))
        .collect::<Result<_>>()?;
    Ok(Batchable { inputs: vec![robust::stack_inputs(&inputs)?], target: robust::stack_psi(&psi)? })
}

/// RSLPN-B training set: features and perturbation labels re-solved at the
/// Ψ predicted by the trained RSLPN-A.
pub fn rslpn_b_data(samples: &[Sample], c: &Constellation, net_a: &RslpnA, p_t: f64, exec: Execution) -> Result<SlpnDataset> {
    let a = rslpn_a_data(samples, c, exec)?;
    let psi = net_a.predict(&a.inputs[0])?;
    let out = par::try_map_range(exec, samples.len(), |i| {
        let p: Array2<f64> = psi.index_axis(Axis(0), i).to_owned().into_dimensionality().expect("rank 2");
        robust::stage_b_sample(aging_of(&samples[i])?, &samples[i].symbols, c, &p, samples[i].sigma2, p_t)
    })?;
    let (feats, ds): (Vec<KktFeatures>, Vec<Array3<f64>>) = out.into_iter().unzip();
    let (b, cc) = slpn::stack_features(&feats)?;
    SlpnDataset::new(b, cc, slpn::stack_labels(&ds)?)
}

/// Trained robust networks and their logs.
pub struct RobustTraining {
    pub net_a: RslpnA,
    pub net_b: Slpn,
    pub logs_a: Vec<EpochLog>,
    pub logs_b: Vec<EpochLog>,
}

/// Sequential two-stage training: RSLPN-A first, then RSLPN-B on its Ψ.
pub fn train_robust(
    data: &Dataset,
    config_a: RslpnAConfig,
    config_b: SlpnConfig,
    train_cfg: &TrainConfig,
    rng: &mut impl Rng,
    exec: Execution,
) -> Result<RobustTraining> {
    let cfg = &data.manifest.config;
    let c = Constellation::new(cfg.modulation)?;
    let train_a = rslpn_a_data(&data.train, &c, exec)?;
    let test_a = if data.test.is_empty() { None } else { Some(rslpn_a_data(&data.test, &c, exec)?) };
    let mut net_a = RslpnA::new(config_a, rng)?;
    let logs_a = slpn::train_regressor(&mut net_a, &train_a, test_a.as_ref(), train_cfg, rng, exec)?;
    let train_b = rslpn_b_data(&data.train, &c, &net_a, cfg.p_t, exec)?;
    let test_b = if data.test.is_empty() { None } else { Some(rslpn_b_data(&data.test, &c, &net_a, cfg.p_t, exec)?) };
    let mut net_b = Slpn::new(config_b, rng);
    let logs_b = slpn::train(&mut net_b, &train_b, test_b.as_ref(), train_cfg, rng, exec)?;
    Ok(RobustTraining { net_a, net_b, logs_a, logs_b })
}

/// Precoding schemes known to the evaluators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "zf")]
    Zf,
    #[serde(rename = "mmse")]
    Mmse,
    #[serde(rename = "cizf")]
    Cizf,
    #[serde(rename = "cimmse")]
    Cimmse,
    #[serde(rename = "cizf-dl")]
    CizfDl,
    #[serde(rename = "cimmse-dl")]
    CimmseDl,
    #[serde(rename = "rcimmse")]
    Rcimmse,
    #[serde(rename = "rcimmse-dl")]
    RcimmseDl,
}

impl Scheme {
    pub const ALL: [Scheme; 8] =
        [Scheme::Zf, Scheme::Mmse, Scheme::Cizf, Scheme::Cimmse, Scheme::CizfDl, Scheme::CimmseDl, Scheme::Rcimmse, Scheme::RcimmseDl];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Zf => "zf",
            Scheme::Mmse => "mmse",
            Scheme::Cizf => "cizf",
            Scheme::Cimmse => "cimmse",
            Scheme::CizfDl => "cizf-dl",
            Scheme::CimmseDl => "cimmse-dl",
            Scheme::Rcimmse => "rcimmse",
            Scheme::RcimmseDl => "rcimmse-dl",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Scheme::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Trained networks available to the evaluators.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub cizf: Option<Slpn>,
    pub cimmse: Option<Slpn>,
    pub rslpn_a: Option<RslpnA>,
    pub rslpn_b: Option<Slpn>,
}

impl Models {
    fn need<'a, T>(m: &'a Option<T>, scheme: Scheme) -> Result<&'a T> {
        m.as_ref().ok_or_else(|| Error::Config(format!("scheme {scheme} needs a trained model")))
    }
}

/// One point of an evaluation curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scheme: Scheme,
    /// SNR or SINR threshold in dB.
    pub x: f64,
    pub metric: f64,
    pub n_trials: u64,
    /// 95% interval.
    pub lo: f64,
    pub hi: f64,
}

impl CurvePoint {
    pub fn ci_half(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    /// True when the two 95% intervals do not overlap.
    pub fn separated_from(&self, other: &CurvePoint) -> bool {
        self.hi < other.lo || other.hi < self.lo
    }
}

/// 95% Wilson score interval for `errors` out of `n`.
pub fn wilson_interval(errors: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959963984540054;
    let (n, p) = (n as f64, errors as f64 / n as f64);
    let denom = 1.0 + z * z / n;
    let center = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let lo = if errors == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if errors as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// Mean with a normal-approximation 95% interval.
pub fn mean_interval(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let half = 1.959963984540054 * (var / n).sqrt();
    (mean, mean - half, mean + half)
}

/// Settings shared by the Monte-Carlo evaluators.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub modulation: Modulation,
    pub l: usize,
    pub p_t: f64,
    pub snr_db: Vec<f64>,
    pub seed: u64,
    /// Post-net refinement for the learned perfect-CSI schemes.
    pub refine: bool,
    /// Independent symbol/noise draws per channel.
    pub repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { modulation: Modulation::QPSK, l: 16, p_t: 1.0, snr_db: vec![25.0], seed: 1, refine: true, repeats: 1 }
    }
}

/// Transmit block of a perfect-CSI scheme: `(X̄, γ̄)`.
fn precode_block(
    scheme: Scheme,
    h: &CMatrix,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    models: &Models,
    refine: bool,
) -> Result<(CMatrix, f64)> {
    let blk = match scheme {
        Scheme::Zf => slp::lp_zf(h, symbols, c, p_t)?,
        Scheme::Mmse => slp::lp_mmse(h, symbols, c, p_t, sigma2)?,
        Scheme::Cizf => slp::cizf_optimal(h, symbols, c, p_t, Execution::Sequential)?.block,
        Scheme::Cimmse => slp::cimmse_optimal(h, symbols, c, p_t, sigma2, Execution::Sequential)?.block,
        Scheme::CizfDl => slpn::slp_dl(Models::need(&models.cizf, scheme)?, Criterion::Zf, h, symbols, c, p_t, refine)?.block,
        Scheme::CimmseDl => {
            slpn::slp_dl(Models::need(&models.cimmse, scheme)?, Criterion::Mmse { sigma2 }, h, symbols, c, p_t, refine)?.block
        }
        Scheme::Rcimmse | Scheme::RcimmseDl => {
            return Err(Error::Config(format!("{scheme} needs an aging model; use the robust evaluator")))
        }
    };
    Ok((blk.x_bar, blk.gamma_bar))
}

fn noise_block(k: usize, l: usize, sigma2: f64, rng: &mut impl Rng) -> Array2<Complex64> {
    let sd = sigma2.sqrt();
    Array2::from_shape_fn((k, l), |_| complex_gaussian(rng) * sd)
}

/// SER per scheme and SNR with perfect CSI. At every trial all schemes see
/// the same symbols and the same noise; receivers scale by the genie γ̄ and
/// make nearest-point decisions.
pub fn eval_ser(schemes: &[Scheme], channels: &[CMatrix], models: &Models, cfg: &EvalConfig, exec: Execution) -> Result<Vec<CurvePoint>> {
    let c = Constellation::new(cfg.modulation)?;
    let trials = channels.len() * cfg.repeats.max(1);
    let mut points = Vec::new();
    for (j, &snr) in cfg.snr_db.iter().enumerate() {
        let sigma2 = snr_to_sigma2(snr, cfg.p_t);
        let counts = par::try_map_range(exec, trials, |t| {
            let h = &channels[t % channels.len()];
            let mut r = substream(cfg.seed, (j * trials + t) as u64);
            let symbols = c.random_symbols(h.rows(), cfg.l, &mut r);
            let noise = noise_block(h.rows(), cfg.l, sigma2, &mut r);
            schemes
                .iter()
                .map(|&s| {
                    let (x, g) = precode_block(s, h, &symbols, &c, cfg.p_t, sigma2, models, cfg.refine)?;
                    let y = h.matmul(&x);
                    Ok(symbols.indexed_iter().filter(|&((k, l), &sent)| demodulate(y[(k, l)] + noise[(k, l)], g, &c) != sent).count() as u64)
                })
                .collect::<Result<Vec<u64>>>()
        })?;
        let n = (trials * channels.first().map_or(0, |h| h.rows()) * cfg.l) as u64;
        for (i, &s) in schemes.iter().enumerate() {
            let errors: u64 = counts.iter().map(|v| v[i]).sum();
            let (lo, hi) = wilson_interval(errors, n);
            points.push(CurvePoint { scheme: s, x: snr, metric: errors as f64 / n as f64, n_trials: n, lo, hi });
        }
    }
    Ok(points)
}

/// Per-symbol transmit vectors (`‖x‖² = P_T`) and perturbed symbols of a
/// scheme under aging. Perfect-CSI schemes treat `h0` as exact.
fn robust_transmit(
    scheme: Scheme,
    aging: &AgingModel,
    symbols: &Array2<usize>,
    c: &Constellation,
    p_t: f64,
    sigma2: f64,
    models: &Models,
) -> Result<(CMatrix, Array2<Complex64>)> {
    let h = &aging.h0;
    Ok(match scheme {
        Scheme::Zf => (slp::lp_zf(h, symbols, c, p_t)?.x, c.map_symbols(symbols)),
        Scheme::Mmse => (slp::lp_mmse(h, symbols, c, p_t, sigma2)?.x, c.map_symbols(symbols)),
        Scheme::Cizf => {
            let s = slp::cizf_optimal(h, symbols, c, p_t, Execution::Sequential)?;
            (s.block.x, s.s_tilde)
        }
        Scheme::Cimmse => {
            let s = slp::cimmse_optimal(h, symbols, c, p_t, sigma2, Execution::Sequential)?;
            (s.block.x, s.s_tilde)
        }
        Scheme::Rcimmse => {
            let s = robust::rcimmse_oracle(aging, symbols, c, p_t, sigma2, OracleOptions::default(), Execution::Sequential)?;
            (s.x, s.s_tilde)
        }
        Scheme::RcimmseDl => {
            let o = robust::rcimmse_dl(
                aging,
                symbols,
                c,
                p_t,
                sigma2,
                Models::need(&models.rslpn_a, scheme)?,
                Models::need(&models.rslpn_b, scheme)?,
                false,
            )?;
            (o.x, o.s_tilde)
        }
        Scheme::CizfDl | Scheme::CimmseDl => {
            let (model, crit) = if scheme == Scheme::CizfDl {
                (Models::need(&models.cizf, scheme)?, Criterion::Zf)
            } else {
                (Models::need(&models.cimmse, scheme)?, Criterion::Mmse { sigma2 })
            };
            let o = slpn::slp_dl(model, crit, h, symbols, c, p_t, true)?;
            (o.block.x, o.s_tilde)
        }
    })
}

/// SER under channel aging: every symbol travels through a freshly drawn aged
/// channel shared by all schemes; PSK phase-only decisions.
pub fn eval_ser_robust(
    schemes: &[Scheme],
    channels: &[AgingModel],
    models: &Models,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<Vec<CurvePoint>> {
    let c = Constellation::new(cfg.modulation)?;
    if !c.is_psk() {
        return Err(Error::Config("robust evaluation supports PSK only".into()));
    }
    let trials = channels.len() * cfg.repeats.max(1);
    let mut points = Vec::new();
    for (j, &snr) in cfg.snr_db.iter().enumerate() {
        let sigma2 = snr_to_sigma2(snr, cfg.p_t);
        let counts = par::try_map_range(exec, trials, |t| {
            let aging = &channels[t % channels.len()];
            let (k, l_len) = (aging.users(), aging.symbols());
            let mut r = substream(cfg.seed, (j * trials + t) as u64);
            let symbols = c.random_symbols(k, l_len, &mut r);
            let noise = noise_block(k, l_len, sigma2, &mut r);
            let true_h: Vec<CMatrix> = (0..l_len).map(|l| aging.sample_aged_channel(l, &mut r)).collect();
            schemes
                .iter()
                .map(|&s| {
                    let (x, _) = robust_transmit(s, aging, &symbols, &c, cfg.p_t, sigma2, models)?;
                    let mut errors = 0u64;
                    for (l, h) in true_h.iter().enumerate() {
                        let y = h.mul_vec(&x.column(l));
                        for kk in 0..k {
                            errors += (demodulate_phase(y[kk] + noise[(kk, l)], &c) != symbols[(kk, l)]) as u64;
                        }
                    }
                    Ok(errors)
                })
                .collect::<Result<Vec<u64>>>()
        })?;
        let n: u64 = (0..trials).map(|t| (channels[t % channels.len()].users() * channels[t % channels.len()].symbols()) as u64).sum();
        for (i, &s) in schemes.iter().enumerate() {
            let errors: u64 = counts.iter().map(|v| v[i]).sum();
            let (lo, hi) = wilson_interval(errors, n);
            points.push(CurvePoint { scheme: s, x: snr, metric: errors as f64 / n as f64, n_trials: n, lo, hi });
        }
    }
    Ok(points)
}

/// Mean robust block MSE per scheme and SNR, with the symbols shared across
/// schemes at each trial.
pub fn eval_robust_mse(
    schemes: &[Scheme],
    channels: &[AgingModel],
    models: &Models,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<Vec<CurvePoint>> {
    let c = Constellation::new(cfg.modulation)?;
    let trials = channels.len() * cfg.repeats.max(1);
    let mut points = Vec::new();
    for (j, &snr) in cfg.snr_db.iter().enumerate() {
        let sigma2 = snr_to_sigma2(snr, cfg.p_t);
        let vals = par::try_map_range(exec, trials, |t| {
            let aging = &channels[t % channels.len()];
            let mut r = substream(cfg.seed, (j * trials + t) as u64);
            let symbols = c.random_symbols(aging.users(), aging.symbols(), &mut r);
            schemes
                .iter()
                .map(|&s| {
                    let (x, st) = robust_transmit(s, aging, &symbols, &c, cfg.p_t, sigma2, models)?;
                    Ok(robust::block_mse(aging, &x, &st, sigma2))
                })
                .collect::<Result<Vec<f64>>>()
        })?;
        for (i, &s) in schemes.iter().enumerate() {
            let v: Vec<f64> = vals.iter().map(|v| v[i]).collect();
            let (mean, lo, hi) = mean_interval(&v);
            points.push(CurvePoint { scheme: s, x: snr, metric: mean, n_trials: trials as u64, lo, hi });
        }
    }
    Ok(points)
}

/// Perturbed symbols a CIZF-family scheme would transmit.
fn cizf_family_symbols(scheme: Scheme, h: &CMatrix, symbols: &Array2<usize>, c: &Constellation, p_t: f64, models: &Models, refine: bool) -> Result<Array2<Complex64>> {
    match scheme {
        Scheme::Zf => Ok(c.map_symbols(symbols)),
        Scheme::Cizf => Ok(slp::cizf_optimal(h, symbols, c, p_t, Execution::Sequential)?.s_tilde),
        Scheme::CizfDl => Ok(slpn::slp_dl(Models::need(&models.cizf, scheme)?, Criterion::Zf, h, symbols, c, p_t, refine)?.s_tilde),
        _ => Err(Error::Config(format!("power sweep supports zf, cizf and cizf-dl, not {scheme}"))),
    }
}

/// Per-channel `‖H†s̃‖²` averaged over a block, one row per channel and one
/// column per scheme: the transmit power needed for unit SINR.
pub fn power_samples(schemes: &[Scheme], channels: &[CMatrix], models: &Models, cfg: &EvalConfig, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let c = Constellation::new(cfg.modulation)?;
    par::try_map_range(exec, channels.len(), |t| {
        let h = &channels[t];
        let mut r = substream(cfg.seed, t as u64);
        let symbols = c.random_symbols(h.rows(), cfg.l, &mut r);
        let pinv = Criterion::Zf.precoder(h, cfg.p_t)?;
        schemes
            .iter()
            .map(|&s| {
                let st = cizf_family_symbols(s, h, &symbols, &c, cfg.p_t, models, cfg.refine)?;
                let l_len = st.ncols();
                Ok((0..l_len).map(|l| norm_sqr(&pinv.mul_vec(&st.column(l).to_vec()))).sum::<f64>() / l_len as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })
}

/// Mean transmit power needed to reach each SINR threshold `γ²/σ²` (dB) with
/// unit noise: `Γ·‖H†s̃‖²` averaged over symbols, then over channels.
pub fn eval_power_vs_sinr(
    schemes: &[Scheme],
    channels: &[CMatrix],
    thresholds_db: &[f64],
    models: &Models,
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<Vec<CurvePoint>> {
    let base = power_samples(schemes, channels, models, cfg, exec)?;
    let mut points = Vec::new();
    for &th in thresholds_db {
        let gain = 10f64.powf(th / 10.0);
        for (i, &s) in schemes.iter().enumerate() {
            let v: Vec<f64> = base.iter().map(|b| b[i] * gain).collect();
            let (mean, lo, hi) = mean_interval(&v);
            points.push(CurvePoint { scheme: s, x: th, metric: mean, n_trials: channels.len() as u64, lo, hi });
        }
    }
    Ok(points)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub k: usize,
    pub nt: usize,
    pub l: usize,
    pub modulation: Modulation,
    pub p_t: f64,
    pub snr_db: f64,
    /// Blocks processed per timed run.
    pub blocks: usize,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { k: 12, nt: 14, l: 100, modulation: Modulation::QPSK, p_t: 1.0, snr_db: 20.0, blocks: 4, reps: 20, seed: 7 }
    }
}

/// Median wall-clock time per symbol of one scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub scheme: Scheme,
    pub k: usize,
    pub nt: usize,
    pub l: usize,
    pub per_symbol_s: f64,
    pub reps: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times each scheme on the same blocks after one warm-up run. Learned
/// schemes run batched over all blocks. Missing models fall back to freshly
/// initialized networks, which cost the same to evaluate.
pub fn bench_runtime(schemes: &[Scheme], models: &Models, cfg: &BenchConfig, exec: Execution) -> Result<Vec<BenchRow>> {
    let c = Constellation::new(cfg.modulation)?;
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blocks: Vec<(CMatrix, Array2<usize>)> =
        (0..cfg.blocks.max(1)).map(|_| (sample_rayleigh(cfg.k, cfg.nt, &mut r), c.random_symbols(cfg.k, cfg.l, &mut r))).collect();
    let sigma2 = snr_to_sigma2(cfg.snr_db, cfg.p_t);
    let fresh = Slpn::new(SlpnConfig::default(), &mut r);
    let symbols = (blocks.len() * cfg.l) as f64;
    let mut rows = Vec::new();
    for &s in schemes {
        let run = || -> Result<()> {
            match s {
                Scheme::Zf | Scheme::Mmse | Scheme::Cizf | Scheme::Cimmse => {
                    par::try_map_slice(exec, &blocks, |(h, sym)| {
                        match s {
                            Scheme::Zf => slp::lp_zf(h, sym, &c, cfg.p_t).map(|_| ()),
                            Scheme::Mmse => slp::lp_mmse(h, sym, &c, cfg.p_t, sigma2).map(|_| ()),
                            Scheme::Cizf => slp::cizf_optimal(h, sym, &c, cfg.p_t, Execution::Sequential).map(|_| ()),
                            _ => slp::cimmse_optimal(h, sym, &c, cfg.p_t, sigma2, Execution::Sequential).map(|_| ()),
                        }
                    })?;
                }
                Scheme::CizfDl => {
                    slpn::slp_dl_batch(models.cizf.as_ref().unwrap_or(&fresh), Criterion::Zf, &blocks, &c, cfg.p_t, true, exec)?;
                }
                Scheme::CimmseDl => {
                    let m = models.cimmse.as_ref().unwrap_or(&fresh);
                    slpn::slp_dl_batch(m, Criterion::Mmse { sigma2 }, &blocks, &c, cfg.p_t, true, exec)?;
                }
                Scheme::Rcimmse | Scheme::RcimmseDl => {
                    return Err(Error::Config(format!("{s} is not part of the runtime benchmark")));
                }
            }
            Ok(())
        };
        run()?;
        let times = (0..cfg.reps.max(1))
            .map(|_| {
                let t0 = Instant::now();
                run().map(|_| t0.elapsed().as_secs_f64() / symbols)
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(BenchRow { scheme: s, k: cfg.k, nt: cfg.nt, l: cfg.l, per_symbol_s: median(times), reps: cfg.reps.max(1) });
    }
    Ok(rows)
}

/// Writes `scheme,<x_name>,metric,n_trials,ci_half`.
pub fn write_curve_csv(path: &Path, x_name: &str, points: &[CurvePoint]) -> Result<()> {
    let mut out = format!("scheme,{x_name},metric,n_trials,ci_half\n");
    for p in points {
        out.push_str(&format!("{},{},{:e},{},{:e}\n", p.scheme, p.x, p.metric, p.n_trials, p.ci_half()));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `scheme,k,nt,l,per_symbol_s,reps`.
pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut out = String::from("scheme,k,nt,l,per_symbol_s,reps\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{:e},{}\n", r.scheme, r.k, r.nt, r.l, r.per_symbol_s, r.reps));
    }
    fs::write(path, out)?;
    Ok(())
}

/// First substream used for held-out channels, far above any sample index.
pub const HELD_OUT_STREAM: u64 = 1 << 40;

/// Held-out Rayleigh channels, disjoint from dataset streams of the same seed.
pub fn rayleigh_channels(n: usize, k: usize, nt: usize, seed: u64) -> Vec<CMatrix> {
    (0..n).map(|i| sample_rayleigh(k, nt, &mut substream(seed, HELD_OUT_STREAM + i as u64))).collect()
}

/// Held-out aging models with a constant correlation.
pub fn aging_channels(n: usize, k: usize, nt: usize, l: usize, alpha: f64, fine: usize, density: f64, seed: u64) -> Result<Vec<AgingModel>> {
    (0..n)
        .map(|i| {
            let mut r = substream(seed, HELD_OUT_STREAM + i as u64);
            let h0 = sample_rayleigh(k, nt, &mut r);
            AgingModel::generate(h0, Array2::from_elem((k, l), alpha), fine, density, &mut r)
        })
        .collect()
}

/// Dense `N×K×L` Ψ tensor, used where a batch of Ψ labels is needed.
pub fn psi_tensor(samples: &[Sample]) -> Result<Tensor> {
    let psi: Vec<Array2<f64>> = samples.iter().filter_map(|s| s.psi.clone()).collect();
    robust::stack_psi(&psi)
}
