//! Whole-pipeline configuration file, one TOML table per stage.
//!
//! ```toml
//! [train]
//! epochs = 30
//! image_size = [128, 128]
//!
//! [invariant]
//! window_size = 15
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csa::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::AucMode;
use crate::invariant::InvariantConfig;
use crate::jesb::SynthesisConfig;
use crate::model::ModelConfig;
use crate::train::{LossConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub k_max: Option<usize>,
    pub seed: u64,
    pub synthesis: SynthesisConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub auc_mode: AucMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: crate::eval::DEFAULT_THRESHOLD,
            auc_mode: AucMode::Pooled,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub invariant: InvariantConfig,
    pub balance: BalanceConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.invariant.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        let t = self.eval.threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::Config(format!("eval threshold must be in (0, 1), got {t}")));
        }
        if self.balance.k_max.is_some_and(|k| k < 2) {
            return Err(Error::Config("balance k_max must be at least 2".into()));
        }
        Ok(())
    }
}
