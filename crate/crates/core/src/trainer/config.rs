use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::{AugmentationSpec, LoraSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum BatchingConfig {
    /// Length-aware packing; bound on summed element count per batch.
    Numel {
        batch_bins: usize,
    },
    Fixed {
        batch_size: usize,
    },
}

/// Reference-model settings used by the command-line front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_classes: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
}

fn default_sample_rate() -> u32 {
    16000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epoch: u32,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_patience")]
    pub patience: u32,
    #[serde(default)]
    pub seed: u64,
    pub batching: BatchingConfig,
    /// Validation metric for best-checkpoint selection and early stopping;
    /// lower is better unless suffixed with `:max`.
    #[serde(default = "default_keep_best_on")]
    pub keep_best_on: String,
    #[serde(default = "default_valid_batch_size")]
    pub valid_batch_size: usize,
    /// Fields recorded by the statistics stage.
    #[serde(default = "default_stats_fields")]
    pub stats_fields: Vec<String>,
    /// Threads materializing batches; results are consumed in plan order.
    #[serde(default = "default_num_workers")]
    pub num_workers: usize,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub lora: Option<LoraSpec>,
    #[serde(default)]
    pub augmentation: Option<AugmentationSpec>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_patience() -> u32 {
    u32::MAX
}
fn default_keep_best_on() -> String {
    "loss".into()
}
fn default_valid_batch_size() -> usize {
    16
}
fn default_stats_fields() -> Vec<String> {
    vec!["speech".into(), "text".into()]
}
fn default_num_workers() -> usize {
    1
}

impl TrainConfig {
    /// Defaults with the given schedule and batching.
    pub fn new(max_epoch: u32, peak_lr: f64, warmup_steps: u64, batching: BatchingConfig) -> Self {
        Self {
            max_epoch,
            peak_lr,
            warmup_steps,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            grad_clip: None,
            patience: default_patience(),
            seed: 0,
            batching,
            keep_best_on: default_keep_best_on(),
            valid_batch_size: default_valid_batch_size(),
            stats_fields: default_stats_fields(),
            num_workers: default_num_workers(),
            model: None,
            lora: None,
            augmentation: None,
        }
    }

    // Negated comparisons so that NaN is rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.max_epoch == 0 {
            return bad("max_epoch must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        match self.batching {
            BatchingConfig::Numel { batch_bins: 0 } => return bad("batch_bins must be positive"),
            BatchingConfig::Fixed { batch_size: 0 } => return bad("batch_size must be positive"),
            _ => {}
        }
        if self.valid_batch_size == 0 || self.num_workers == 0 {
            return bad("valid_batch_size and num_workers must be positive");
        }
        if self.keep_best_on.trim_end_matches(":max").is_empty() {
            return bad("keep_best_on names no metric");
        }
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        if let Some(a) = &self.augmentation {
            a.validate()?;
        }
        Ok(())
    }

    /// Metric name and whether larger is better.
    pub fn best_metric(&self) -> (&str, bool) {
        match self.keep_best_on.strip_suffix(":max") {
            Some(name) => (name, true),
            None => (self.keep_best_on.as_str(), false),
        }
    }

    /// Digest of every setting that shapes the optimization trajectory.
    /// `max_epoch` and `num_workers` are excluded so a run can be extended
    /// or re-parallelized on resume.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("max_epoch");
            obj.remove("num_workers");
        }
        // serde_json maps are sorted, so this rendering is canonical.
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
max_epoch = 10
peak_lr = 1e-4
warmup_steps = 15000
seed = 3

[batching]
type = "numel"
batch_bins = 64000

[lora]
target_patterns = ["W"]
rank = 8
alpha = 8.0
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = TrainConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.999);
        assert_eq!(cfg.eps, 1e-8);
        assert_eq!(cfg.weight_decay, 0.0);
        assert_eq!(cfg.batching, BatchingConfig::Numel { batch_bins: 64000 });
        let lora = cfg.lora.as_ref().unwrap();
        assert_eq!(lora.rank, 8);
        assert_eq!(lora.a_init_scale, 0.01);
        let back = TrainConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let s = format!("colour = 1\n{SAMPLE}");
        assert!(matches!(TrainConfig::from_toml_str(&s), Err(Error::Config(_))));
        let s = SAMPLE.replace("rank = 8", "rank = 8\nranks = 2");
        assert!(matches!(TrainConfig::from_toml_str(&s), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_epoch_budget_only() {
        let a = TrainConfig::from_toml_str(SAMPLE).unwrap();
        let mut b = a.clone();
        b.max_epoch = 20;
        b.num_workers = 4;
        assert_eq!(a.config_hash(), b.config_hash());
        b.warmup_steps = 5000;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn best_metric_direction() {
        let mut cfg = TrainConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.best_metric(), ("loss", false));
        cfg.keep_best_on = "accuracy:max".into();
        assert_eq!(cfg.best_metric(), ("accuracy", true));
    }
}
