//! Run configuration: one JSON document with the sections `data`, `model`,
//! `train`, `eval` and `paths`. Unknown keys are rejected and every field
//! has a default.

use std::path::Path;

use bella_numcore::AdamWConfig;
use serde::{Deserialize, Serialize};

use crate::error::{BellaError, Result};
use crate::lm::{LmConfig, LoraConfig};
use crate::projector::ProjectorVariant;
use crate::scenesim::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_episodes: u64,
    /// Test episodes follow the training ids.
    pub test_episodes: u64,
    pub episode_len: usize,
    pub min_actors: usize,
    pub max_actors: usize,
    pub qa_per_category: usize,
    /// QA items are drawn from frames `0, s, 2s, …`.
    pub qa_frame_stride: usize,
    /// Fraction of training episodes held out for validation.
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_episodes: 200,
            test_episodes: 50,
            episode_len: 20,
            min_actors: 0,
            max_actors: 6,
            qa_per_category: 1,
            qa_frame_stride: 10,
            val_fraction: 0.1,
        }
    }
}

impl DataConfig {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            episode_len: self.episode_len,
            min_actors: self.min_actors,
            max_actors: self.max_actors,
            forced_actor_count: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub projector: ProjectorVariant,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    /// Seed of the frozen language model weights.
    pub lm_seed: u64,
    /// Epochs of from-scratch language model training before stage 1;
    /// 0 keeps the randomly initialized model.
    pub lm_pretrain_epochs: usize,
    pub lm_pretrain_lr: f64,
    pub lm_pretrain_batch: usize,
    /// Std of Gaussian noise added to the summary token while the LM trains.
    pub lm_pretrain_noise: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            projector: ProjectorVariant::DeepConv,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 64,
            lora_rank: 8,
            lora_alpha: 16.0,
            lm_seed: 0,
            lm_pretrain_epochs: 6,
            lm_pretrain_lr: 1e-3,
            lm_pretrain_batch: 8,
            lm_pretrain_noise: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn lm_config(&self, vocab_size: usize) -> Result<LmConfig> {
        let c = LmConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_len: self.max_len,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.lora_rank,
            alpha: self.lora_alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub lr_projector: f64,
    pub lr_lm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Finetune from a random projector instead of a stage-1 checkpoint.
    pub ablate_pretraining: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            seed: 0,
            epochs_pretrain: 10,
            epochs_finetune: 5,
            batch_size: 2,
            lr_projector: 1e-4,
            lr_lm: 2e-4,
            beta1: o.beta1,
            beta2: o.beta2,
            epsilon: o.epsilon,
            weight_decay: o.weight_decay,
            ablate_pretraining: false,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    /// Human-readable warnings for settings that depart from the usual
    /// two-rate setup.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.lr_projector == self.lr_lm {
            w.push(format!(
                "lr_projector equals lr_lm ({}); the reference setup uses distinct rates (1e-4 / 2e-4)",
                self.lr_lm
            ));
        }
        w
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(BellaError::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr_projector > 0.0 && self.lr_lm > 0.0) {
            return Err(BellaError::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    /// Training seeds of the ablation arms.
    pub ablation_seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 10,
            ablation_seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data_dir: String,
    pub runs_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            runs_dir: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| BellaError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BellaError::io(path, e))?;
        Self::from_json(&text).map_err(|e| BellaError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.data.qa_frame_stride == 0 {
            return Err(BellaError::Config("data.qa_frame_stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(BellaError::Config("data.val_fraction must be in [0, 1)".into()));
        }
        if self.data.max_actors < self.data.min_actors {
            return Err(BellaError::Config("data.max_actors < data.min_actors".into()));
        }
        if self.model.lm_pretrain_batch == 0 {
            return Err(BellaError::Config("model.lm_pretrain_batch must be positive".into()));
        }
        if self.eval.max_new_tokens == 0 {
            return Err(BellaError::Config("eval.max_new_tokens must be positive".into()));
        }
        self.model.lm_config(crate::langdata::Vocab::canonical().len())?;
        Ok(())
    }

    /// Sets a dotted key (`train.seed`) from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut doc = serde_json::to_value(&*self).expect("config serializes");
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| BellaError::Config(format!("key `{key}` must look like section.field")))?;
        let slot = doc
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| BellaError::Config(format!("unknown config key `{key}`")))?;
        *slot = match serde_json::from_str(value) {
            Ok(v) => v,
            Err(_) => serde_json::Value::String(value.to_string()),
        };
        let c: RunConfig = serde_json::from_value(doc).map_err(|e| BellaError::Config(format!("{key}: {e}")))?;
        c.validate()?;
        *self = c;
        Ok(())
    }

    /// Every `section.field` key with its default value, in document order.
    pub fn default_keys() -> Vec<(String, String)> {
        let doc = serde_json::to_value(RunConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        for section in ["data", "model", "train", "eval", "paths"] {
            if let Some(obj) = doc[section].as_object() {
                for (k, v) in obj {
                    out.push((format!("{section}.{k}"), v.to_string()));
                }
            }
        }
        out
    }
}
