//! Experiment configuration: sectioned `key = value` text (TOML) with one section per stage.
//! Unknown keys and sections are hard errors so a typo in a hyperparameter name can never go
//! unnoticed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{OpisError, Result};
use crate::eval::{DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR};
use crate::harness::{generate_dataset, Method, Scene, SceneConfig, TrainConfig};
use crate::rng::{derive_seed, Purpose};
use crate::sampler::Hyperparams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Root seed; every random stream of a run derives from it.
    pub seed: u64,
    pub method: Method,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            seed: t.seed,
            method: t.method,
            iterations: t.iterations,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lr_decay: t.lr_decay,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            train_scenes: 200,
            eval_scenes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_branches: usize,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection { num_branches: t.num_branches, init_std: t.init_std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub finetune_fraction: f64,
    pub mu_s: f64,
    pub alpha: f64,
    pub neglect_base: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        ScheduleSection {
            finetune_fraction: TrainConfig::default().finetune_fraction,
            mu_s: h.mu_s,
            alpha: h.alpha,
            neglect_base: h.neglect_base,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub lambda_ig: f64,
    pub lambda_ng: f64,
    pub n_bins: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        SamplerSection { lambda_ig: h.lambda_ig, lambda_ng: h.lambda_ng, n_bins: h.n_bins }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightSection {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ReweightSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        ReweightSection { beta: h.beta, gamma: h.gamma }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub nms_iou: f64,
    pub score_floor: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { nms_iou: DEFAULT_NMS_IOU, score_floor: DEFAULT_SCORE_FLOOR }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SceneConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub reweight: ReweightSection,
    pub eval: EvalSection,
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry the offending key and its line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| OpisError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OpisError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            OpisError::Config(msg) => OpisError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let as_config = |e: OpisError| match e {
            OpisError::InvalidInput(msg) => OpisError::Config(msg),
            other => other,
        };
        self.data.validate().map_err(as_config)?;
        self.train_config().validate().map_err(as_config)?;
        if self.train.train_scenes == 0 || self.train.eval_scenes == 0 {
            return Err(OpisError::Config("train_scenes and eval_scenes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.nms_iou) || !(self.eval.score_floor >= 0.0) {
            return Err(OpisError::Config("nms_iou must lie in [0, 1] and score_floor be >= 0".into()));
        }
        Ok(())
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            mu_s: self.schedule.mu_s,
            alpha: self.schedule.alpha,
            neglect_base: self.schedule.neglect_base,
            lambda_ig: self.sampler.lambda_ig,
            lambda_ng: self.sampler.lambda_ng,
            beta: self.reweight.beta,
            gamma: self.reweight.gamma,
            n_bins: self.sampler.n_bins,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed,
            method: self.train.method,
            iterations: self.train.iterations,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            lr_decay: self.train.lr_decay,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            finetune_fraction: self.schedule.finetune_fraction,
            num_branches: self.model.num_branches,
            init_std: self.model.init_std,
            hyper: self.hyperparams(),
        }
    }

    pub fn train_set(&self) -> Result<Vec<Scene>> {
        generate_dataset(&self.data, train_dataset_seed(self.train.seed), self.train.train_scenes)
    }

    pub fn eval_set(&self) -> Result<Vec<Scene>> {
        self.eval_set_from(eval_dataset_seed(self.train.seed))
    }

    pub fn eval_set_from(&self, dataset_seed: u64) -> Result<Vec<Scene>> {
        generate_dataset(&self.data, dataset_seed, self.train.eval_scenes)
    }
}

pub fn train_dataset_seed(root: u64) -> u64 {
    derive_seed(root, Purpose::Scene, &[0])
}

pub fn eval_dataset_seed(root: u64) -> u64 {
    derive_seed(root, Purpose::Scene, &[1])
}
