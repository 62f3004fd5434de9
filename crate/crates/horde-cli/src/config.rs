//! Run configuration: JSON with a fixed schema, unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use horde_core::data::{load_idx, synth_digits, Dataset};
use horde_core::model::{ModelConfig, StackMode};
use horde_core::optim::AdamConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the config seed when set.
pub const SEED_ENV: &str = "HORDE_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image/label file pairs.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Procedurally rendered digit images in IDX-equivalent form.
    SyntheticDigits {
        train_per_class: usize,
        test_per_class: usize,
        data_seed: u64,
    },
    /// Gaussian-mixture feature sets (oracle fixtures; not trainable).
    SyntheticMixture {
        num_classes: usize,
        per_class: usize,
        dim: usize,
        spread: f64,
        data_seed: u64,
    },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchConfig {
    pub classes_per_batch: usize,
    pub images_per_class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub modes: Vec<StackMode>,
    /// Train one model per k in `2..=max_orders` per mode.
    pub max_orders: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub steps: u64,
    pub batch: BatchConfig,
    pub seed: u64,
    #[serde(default = "RunConfig::default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "RunConfig::default_eval_ks")]
    pub eval_ks: Vec<usize>,
    pub out_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationConfig>,
}

impl RunConfig {
    fn default_eval_every() -> u64 {
        500
    }

    fn default_eval_ks() -> Vec<usize> {
        vec![1, 2, 4, 8]
    }

    /// Parse a config file, apply the `HORDE_SEED` override, validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed} is not a u64"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch.classes_per_batch < 2 || self.batch.images_per_class < 2 {
            bail!(
                "batch needs P ≥ 2 and Q ≥ 2, got P = {}, Q = {}",
                self.batch.classes_per_batch,
                self.batch.images_per_class
            );
        }
        if self.eval_ks.is_empty() {
            bail!("eval_ks must not be empty");
        }
        Ok(())
    }

    /// Resolved config as a JSON value (embedded in every output).
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Load the train and test splits described by `dataset`.
    pub fn load_splits(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels, "train")?;
                let test = load_idx(test_images, test_labels, "test")?;
                Ok((train, test))
            }
            DatasetConfig::SyntheticDigits {
                train_per_class,
                test_per_class,
                data_seed,
            } => {
                let train = synth_digits(*train_per_class, *data_seed, "train");
                let test = synth_digits(*test_per_class, data_seed.wrapping_add(1), "test");
                Ok((train, test))
            }
            DatasetConfig::SyntheticMixture { .. } => {
                bail!("synthetic-mixture datasets hold raw features; training needs images")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use horde_core::losses::{LossConfig, LossKind};

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "dataset": {"kind": "synthetic-digits", "train_per_class": 20, "test_per_class": 5, "data_seed": 1},
            "model": {
                "horde": true,
                "orders": 3,
                "sketch_dim": 16,
                "embed_dim": 8,
                "stack_mode": "trainable-cascaded",
                "loss": {"kind": "contrastive"}
            },
            "optimizer": {"lr": 1e-5},
            "steps": 2,
            "batch": {"classes_per_batch": 2, "images_per_class": 2},
            "seed": 9,
            "out_dir": "/tmp/run"
        })
    }

    #[test]
    fn parses_and_applies_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, minimal_json().to_string()).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.eval_every, 500);
        assert_eq!(cfg.eval_ks, vec![1, 2, 4, 8]);
        assert_eq!(cfg.model.loss.kind, LossKind::Contrastive);
        assert_eq!(cfg.model.loss.margin, 0.5);
        assert_eq!(cfg.optimizer.beta1, 0.9);
        assert!(matches!(cfg.model.stack_mode, StackMode::TrainableCascaded));
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut bad = minimal_json();
        bad["learning_rate_typo"] = serde_json::json!(1);
        fs::write(&path, bad.to_string()).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(format!("{err:#}").contains("unknown field"), "{err:#}");
    }

    #[test]
    fn seed_env_overrides_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, minimal_json().to_string()).unwrap();
        std::env::set_var(SEED_ENV, "1234");
        let cfg = RunConfig::load(&path).unwrap();
        std::env::remove_var(SEED_ENV);
        assert_eq!(cfg.seed, 1234);
    }

    #[test]
    fn loss_config_roundtrips_through_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, minimal_json().to_string()).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        let echoed: RunConfig = serde_json::from_value(cfg.echo()).unwrap();
        assert_eq!(echoed.seed, cfg.seed);
        let _ = LossConfig::contrastive(0.5);
    }
}
