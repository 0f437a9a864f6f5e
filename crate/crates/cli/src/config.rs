//! Run configuration: one JSON file, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use slpkit::harness::{BenchConfig, DatasetConfig};
use slpkit::robust::RslpnAConfig;
use slpkit::slpn::{SlpnConfig, TrainConfig};

/// Environment variable that anchors relative data and model paths.
pub const DATA_ROOT_ENV: &str = "SLPKIT_DATA_ROOT";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub slpn: SlpnConfig,
    pub rslpn_a: RslpnAConfig,
    pub rslpn_b: SlpnConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { slpn: SlpnConfig::default(), rslpn_a: RslpnAConfig::default(), rslpn_b: SlpnConfig { blocks: 2, width: 16 } }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub snr_db: Vec<f64>,
    pub thresholds_db: Vec<f64>,
    pub channels: usize,
    pub repeats: usize,
    pub refine: bool,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            thresholds_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            channels: 500,
            repeats: 1,
            refine: true,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchConfig,
    /// Dataset directory.
    pub data: Option<PathBuf>,
    /// Model checkpoint (RSLPN-A for the robust scenario).
    pub model: Option<PathBuf>,
    /// RSLPN-B checkpoint.
    pub model_b: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", p.display()))
            }
        }
    }
}

/// Resolves a relative path against the data root, if one is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if path.is_relative() => Path::new(&root).join(path),
        _ => path.to_path_buf(),
    }
}

/// Parses `start:step:stop` (inclusive) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let bad = || format!("invalid grid '{s}'");
    if s.contains(':') {
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
        let [start, step, stop] = parts[..] else { return Err(bad()) };
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|i| start + step * i as f64).collect())
    } else {
        s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect()
    }
}
