//! Experiment configuration file (TOML). Every table rejects unknown keys and
//! errors name the offending key path, e.g. `run.mode`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{PretrainConfig, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{CostModel, TimeModel};
use crate::orchestrator::{Dataset, RunConfig, SweepAxis};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Exported features; when absent the synthetic benchmark is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub eval_fraction: f64,
    /// Seeds the eval split of manifest datasets (synthetic ones use `synth.seed`).
    pub split_seed: u64,
    pub synth: SynthSpec,
    pub pretrain: PretrainConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            eval_fraction: 0.2,
            split_seed: 0,
            synth: SynthSpec::default(),
            pretrain: PretrainConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.manifest {
            Some(path) => Dataset::from_manifest(path, self.eval_fraction, self.split_seed),
            None => Dataset::synthetic(&self.synth, &self.pretrain, self.eval_fraction),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub label_price: f64,
    /// Instance price per hour; training cost is this times the active-learning hours.
    pub hourly_rate: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            label_price: 0.04,
            hourly_rate: 0.0,
        }
    }
}

impl CostConfig {
    pub fn model(&self, hours: f64) -> Result<CostModel> {
        CostModel::from_rate(self.label_price, self.hourly_rate, hours)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            axis: SweepAxis::UpdatePosition,
            values: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub run: RunConfig,
    pub cost: CostConfig,
    /// Per-iteration hours; `n_al` is taken from `run.n_iters`.
    pub time: TimeModel,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let key = if key == "." { "<file>".to_string() } else { key };
            Error::config(key, e.into_inner().message().to_string())
        })
    }

    /// Loads `path` and resolves the manifest path against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<file>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
        }
        self.time.validate()?;
        if !(self.cost.label_price >= 0.0) {
            return Err(Error::config("cost.label_price", "must be >= 0"));
        }
        if !(self.cost.hourly_rate >= 0.0) {
            return Err(Error::config("cost.hourly_rate", "must be >= 0"));
        }
        Ok(())
    }

    pub fn time_model(&self) -> TimeModel {
        TimeModel {
            n_al: self.run.n_iters,
            ..self.time
        }
    }
}
