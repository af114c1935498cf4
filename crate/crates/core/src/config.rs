//! Experiment configuration, loaded from TOML. Every section and field is
//! optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub masknet: MasknetConfig,
    pub augment: AugmentConfig,
    pub train: TrainConfig,
    pub calib: CalibConfig,
    pub memory: MemoryConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            masknet: MasknetConfig::default(),
            augment: AugmentConfig::default(),
            train: TrainConfig::default(),
            calib: CalibConfig::default(),
            memory: MemoryConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the four IDX files.
    pub mnist_dir: PathBuf,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub val_fraction: f64,
    /// Caps training samples per class (before the validation split).
    pub max_train_per_class: Option<usize>,
    pub synthetic_dim: usize,
    pub synthetic_samples_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_sigma: f64,
    pub synthetic_spacing: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            n_tasks: 5,
            classes_per_task: 2,
            val_fraction: 0.1,
            max_train_per_class: None,
            synthetic_dim: s.dim,
            synthetic_samples_per_class: s.samples_per_class,
            synthetic_test_per_class: s.test_per_class,
            synthetic_sigma: s.sigma,
            synthetic_spacing: s.spacing,
        }
    }
}

impl DataConfig {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            n_tasks: self.n_tasks,
            classes_per_task: self.classes_per_task,
            dim: self.synthetic_dim,
            samples_per_class: self.synthetic_samples_per_class,
            test_per_class: self.synthetic_test_per_class,
            val_fraction: self.val_fraction,
            sigma: self.synthetic_sigma,
            spacing: self.synthetic_spacing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub depth: usize,
    pub proj_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden_width: 256, depth: 3, proj_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasknetConfig {
    pub s_max: f32,
    /// Regularizer strength per task; the last entry repeats for later tasks.
    pub lambda: Vec<f64>,
    /// Anneal the attention scale from `1/s_max` to `s_max` within each epoch.
    pub anneal: bool,
}

impl Default for MasknetConfig {
    fn default() -> Self {
        Self { s_max: 700.0, lambda: vec![0.25, 0.1], anneal: true }
    }
}

impl MasknetConfig {
    pub fn lambda_for(&self, task: usize) -> f64 {
        self.lambda.get(task).or(self.lambda.last()).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    /// Joint gradient-norm limit for the contrastive stage; 0 disables.
    pub max_grad_norm: f64,
    pub temperature: f64,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 128,
            base_lr: 0.01,
            peak_lr: 0.1,
            warmup_epochs: 5,
            momentum: 0.9,
            max_grad_norm: 1.0,
            temperature: 0.07,
            finetune_epochs: 20,
            finetune_lr: 0.1,
            finetune_batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibConfig {
    pub iterations: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { iterations: 160, lr: 0.01, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    pub per_class: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self { per_class: 20 }
    }
}

/// Score used for out-of-distribution detection and task inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScore {
    /// Maximum ensemble logit.
    MaxLogit,
    /// Maximum ensemble softmax probability.
    MaxSoftmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ood_score: OodScore,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ood_score: OodScore::MaxLogit, batch_size: 512 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let t = &self.train;
        if self.data.n_tasks == 0 || self.data.classes_per_task == 0 {
            return bad("data.n_tasks and data.classes_per_task must be positive");
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return bad("data.val_fraction must lie in [0, 1)");
        }
        if t.epochs == 0 || t.batch_size == 0 || t.finetune_batch_size == 0 {
            return bad("train.epochs and batch sizes must be positive");
        }
        if t.warmup_epochs >= t.epochs {
            return bad("train.warmup_epochs must be smaller than train.epochs");
        }
        if !(t.max_grad_norm >= 0.0) {
            return bad("train.max_grad_norm must be non-negative");
        }
        if t.temperature <= 0.0 {
            return bad("train.temperature must be positive");
        }
        if self.masknet.s_max < 1.0 {
            return bad("masknet.s_max must be at least 1");
        }
        if self.masknet.lambda.iter().any(|&l| l < 0.0) {
            return bad("masknet.lambda entries must be non-negative");
        }
        if self.calib.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }
}
