//! The TOML run configuration. Every section is optional and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use smoothwarp::evaluation::{PlumeConfig, StudyConfig};
use smoothwarp::{BBox, Generation, ModelConfig, Scenario, Variant};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub report: ReportConfig,
}

/// Synthetic forecast grid plus station data. `scenario.seed` is the seed
/// of the command; the plume seed is derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_times: usize,
    pub bbox: BBox,
    pub scenario: Scenario,
    pub plume: PlumeConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            nx: 64,
            ny: 48,
            n_times: 10,
            bbox: BBox::unit(),
            scenario: Scenario::default(),
            plume: PlumeConfig::default(),
        }
    }
}

/// Input paths left unset default to the `--out` directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: Option<PathBuf>,
    pub variant: Variant,
    /// Leading fraction of the timesteps used for fitting.
    pub train_fraction: f64,
    pub model: ModelConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { data: None, variant: Variant::Full, train_fraction: 0.6, model: ModelConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub data: Option<PathBuf>,
    /// Directory holding the output of `fit`.
    pub fit: Option<PathBuf>,
    pub draws_per_state: usize,
    pub level: f64,
    pub write_draws: bool,
    pub seed: u64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig { data: None, fit: None, draws_per_state: 1, level: 0.95, write_draws: true, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Station file holding the held-out truth.
    pub data: Option<PathBuf>,
    /// Directory holding the output of `predict`.
    pub predictions: Option<PathBuf>,
    pub level: f64,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig { data: None, predictions: None, level: 0.95 }
    }
}

/// The replicated simulation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub scenarios: Vec<Generation>,
    pub station_counts: Vec<usize>,
    pub variants: Vec<Variant>,
    pub replicates: usize,
    /// Template for every scenario; `generation`, `n_stations` and `seed`
    /// are set by the study.
    pub scenario: Scenario,
    pub study: StudyConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            scenarios: Generation::ALL.to_vec(),
            station_counts: vec![50],
            variants: Variant::ALL.to_vec(),
            replicates: 3,
            scenario: Scenario::default(),
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
