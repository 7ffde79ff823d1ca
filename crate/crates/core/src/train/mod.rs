//! Staged incremental training, the fine-tuning baseline, joint training and
//! checkpointing.

mod checkpoint;
mod optim;
mod stage;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ResumeState, RngState, CHECKPOINT_VERSION};
pub use optim::{poly_lr, Optimizer, OptimizerKind, POLY_POWER};
pub use stage::{LossTerms, StageRun};

use crate::error::{Error, Result};
use crate::model::Category;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "woMem")]
    WoMem,
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "joint")]
    Joint,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::WoMem, Mode::Ft, Mode::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::WoMem => "woMem",
            Mode::Ft => "ft",
            Mode::Joint => "joint",
        }
    }

    pub fn uses_memory(self) -> bool {
        self == Mode::Full
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Mode::Full | Mode::WoMem)
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (expected full, woMem, ft or joint)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub kd: f64,
    pub mem: f64,
    pub same: f64,
    pub oppo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kd: 1.0,
            mem: 0.1,
            same: 0.1,
            oppo: 0.1,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        kd: 0.0,
        mem: 0.0,
        same: 0.0,
        oppo: 0.0,
    };
}

/// Hyperparameters shared by every stage of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate of the first stage (and of joint training).
    pub lr_first: f64,
    /// Initial learning rate of every later stage.
    pub lr_later: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerKind,
    pub kd_temperature: f64,
    pub oppo_margin: f64,
    /// Cap on background voxels averaged per iteration for the separation loss.
    pub background_samples: usize,
    pub augment: bool,
    pub memory_m0: f64,
    pub memory_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            lr_first: 3e-4,
            lr_later: 1.5e-4,
            batch_size: 2,
            weights: LossWeights::default(),
            optimizer: OptimizerKind::default(),
            kd_temperature: 1.0,
            oppo_margin: 0.0,
            background_samples: 1024,
            augment: true,
            memory_m0: crate::memory::DEFAULT_M0,
            memory_power: crate::memory::DEFAULT_POWER,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.kd, w.mem, w.same, w.oppo].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_first > 0.0 && self.lr_later > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.kd_temperature > 0.0) {
            return Err(Error::Config("kd_temperature must be positive".into()));
        }
        if self.background_samples == 0 {
            return Err(Error::Config("background_samples must be at least 1".into()));
        }
        crate::memory::momentum(0, 1, self.memory_m0, self.memory_power)?;
        Ok(())
    }
}

/// Everything that defines one stage's training; echoed into its checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// 1-based stage index.
    pub stage: usize,
    pub mode: Mode,
    pub new_categories: Vec<Category>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.stage == 0 {
            return Err(Error::Config("stages are numbered from 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config(format!("stage {} has zero epochs", self.stage)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("stage {} learning rate must be positive", self.stage)));
        }
        if self.new_categories.is_empty() {
            return Err(Error::Config(format!("stage {} introduces no categories", self.stage)));
        }
        Ok(())
    }
}

/// One training iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: usize,
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub m_k: f64,
    pub loss_total: f64,
    pub loss_seg: f64,
    pub loss_kd: f64,
    pub loss_mem: f64,
    pub loss_same: f64,
    pub loss_oppo: f64,
}

impl LogRecord {
    pub fn to_json_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("log record serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
        assert!("womem".parse::<Mode>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.weights.kd = -1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.memory_m0 = 1.5;
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "nope": 1}"#).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"optimizer": {"kind": "sgd", "momentum": 0.99}}"#).unwrap();
        assert_eq!(c.optimizer, OptimizerKind::Sgd { momentum: 0.99 });
    }
}
