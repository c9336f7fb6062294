//! TOML experiment configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jal::{FusionMode, JalConfig, ModelConfig};
use crate::register::RegistrationConfig;
use crate::synthdata::PhantomSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub per_class: usize,
    pub test_fraction: f64,
    /// Stamp the corner marker (class-correlated in train, random in test).
    pub confounded: bool,
    /// ADASYN neighbours applied to the training split; 0 disables oversampling.
    pub adasyn_k: usize,
    pub adasyn_beta: f64,
    pub phantom: PhantomSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            per_class: 40,
            test_fraction: 0.25,
            confounded: true,
            adasyn_k: 0,
            adasyn_beta: 1.0,
            phantom: PhantomSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub modes: Vec<FusionMode>,
    /// Candidate penalty weights for `ablate --sweep`.
    pub sweep: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            modes: vec![FusionMode::Late, FusionMode::Early],
            sweep: vec![0.1, 1.0, 10.0, 100.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: FusionMode,
    pub model: ModelConfig,
    pub jal: JalConfig,
    pub data: DataConfig,
    pub registration: RegistrationConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.jal.validate()?;
        self.registration.validate()?;
        self.data.phantom.validate()?;
        if self.data.per_class < 2 {
            return Err(Error::config("need at least 2 subjects per class"));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must be in (0, 1)"));
        }
        if self.ablation.sweep.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::config("sweep values must be positive"));
        }
        for r in self.model.dropout {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }
}
