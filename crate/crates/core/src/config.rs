//! Experiment configuration: a sectioned TOML schema covering dataset,
//! model, prior, optimisation, grid axes, and output location.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bnn::{Estimator, PredictFrom};
use crate::error::{Error, Result};
use crate::priors::PriorStrategy;

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Deterministic 10-class image-like generator (8x8 features).
    SyntheticImages {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_image_noise")]
        noise: f64,
    },
    TwoMoons {
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_moons_noise")]
        noise: f64,
    },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        /// Subset sizes; 0 keeps everything.
        #[serde(default)]
        n_train: usize,
        #[serde(default)]
        n_test: usize,
    },
    Csv {
        train_path: String,
        test_path: String,
    },
}

fn default_image_noise() -> f64 {
    0.15
}

fn default_moons_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of weight layers.
    pub depth: usize,
    /// Hidden width.
    pub width: usize,
    /// Initial summed weight variance per unit (sigma_0^2).
    pub init_variance: f64,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_predict_from")]
    pub predict_from: PredictFrom,
    #[serde(default = "default_predict_samples")]
    pub predict_samples: usize,
}

fn default_estimator() -> Estimator {
    Estimator::Rt
}

fn default_predict_from() -> PredictFrom {
    PredictFrom::QTilde
}

fn default_predict_samples() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_adam")]
    pub eps_adam: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Probe cadence in steps.
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    /// Evaluation cadence in epochs; 0 evaluates only at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Also evaluate on the training split (the test split is always
    /// evaluated).
    #[serde(default = "default_eval_train")]
    pub eval_train: bool,
}

fn default_eval_train() -> bool {
    true
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps_adam() -> f64 {
    1e-8
}

fn default_probe_every() -> usize {
    50
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub depths: Vec<usize>,
    pub variances: Vec<f64>,
    pub strategies: Vec<PriorStrategy>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            depths: vec![2, 5, 10, 20, 35, 50],
            variances: vec![1e-3, 1e-2, 1e-1, 0.5, 1.0, 2.0, 4.0],
            strategies: vec![
                PriorStrategy::FixedGaussian { mu0: 0.0, var0: 1.0 },
                PriorStrategy::SelfStabilising,
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub prior: PriorStrategy,
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "runs".to_string()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, reason: &str| {
            Err(Error::Config {
                field: field.into(),
                reason: reason.into(),
            })
        };
        if self.schema_version != SCHEMA_VERSION {
            return err(
                "schema_version",
                &format!("unsupported version (expected {SCHEMA_VERSION})"),
            );
        }
        if self.model.depth < 1 {
            return err("model.depth", "must be at least 1");
        }
        if self.model.width < 1 {
            return err("model.width", "must be at least 1");
        }
        if self.model.init_variance <= 0.0 {
            return err("model.init_variance", "must be positive");
        }
        if self.model.predict_samples < 1 {
            return err("model.predict_samples", "must be at least 1");
        }
        if self.train.batch_size < 1 {
            return err("train.batch_size", "must be at least 1");
        }
        if self.train.seeds.is_empty() {
            return err("train.seeds", "must be nonempty");
        }
        if self.train.lr < 0.0 {
            return err("train.lr", "must be nonnegative");
        }
        if self.train.probe_every < 1 {
            return err("train.probe_every", "must be at least 1");
        }
        self.prior.validate()?;
        if let Some(grid) = &self.grid {
            if grid.depths.is_empty() {
                return err("grid.depths", "must be nonempty");
            }
            if grid.variances.is_empty() {
                return err("grid.variances", "must be nonempty");
            }
            if grid.strategies.is_empty() {
                return err("grid.strategies", "must be nonempty");
            }
            for v in &grid.variances {
                if *v <= 0.0 {
                    return err("grid.variances", "entries must be positive");
                }
            }
            for d in &grid.depths {
                if *d < 1 {
                    return err("grid.depths", "entries must be at least 1");
                }
            }
            for s in &grid.strategies {
                s.validate()?;
            }
        }
        match &self.dataset {
            DatasetConfig::SyntheticImages { n_train, n_test, noise } => {
                if *n_train == 0 || *n_test == 0 {
                    return err("dataset.n_train", "splits must be nonempty");
                }
                if *noise < 0.0 {
                    return err("dataset.noise", "must be nonnegative");
                }
            }
            DatasetConfig::TwoMoons { n_train, n_test, noise } => {
                if n_train % 2 != 0 || n_test % 2 != 0 {
                    return err("dataset.n_train", "two-moons sizes must be even");
                }
                if *n_train == 0 || *n_test == 0 {
                    return err("dataset.n_train", "splits must be nonempty");
                }
                if *noise < 0.0 {
                    return err("dataset.noise", "must be nonnegative");
                }
            }
            DatasetConfig::Idx { .. } | DatasetConfig::Csv { .. } => {}
        }
        Ok(())
    }

    /// Layer widths for a given dataset: input, (depth-1) hidden layers of
    /// `width`, then the class count.
    pub fn dims(&self, input_dim: usize, output_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        for _ in 1..self.model.depth {
            dims.push(self.model.width);
        }
        dims.push(output_dim);
        dims
    }

    /// Stable hash of the canonical serialisation (FNV-1a), recorded in run
    /// logs to tie outputs back to their configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}
