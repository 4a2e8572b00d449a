//! Training configuration: a flat `key = value` text file with CLI
//! overrides.  Unknown keys fail fast so typos cannot silently revert a
//! setting to its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use avqa_core::model::ModelVariant;

use crate::error::{AvqaError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Optimizer-step cap; 0 disables the cap.
    pub max_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Clip length; must match the `k` recorded in the dataset items.
    pub k: usize,
    /// GRU hidden width; 0 means "match the feature dimension".
    pub gru_hidden: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ffn_mult: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
    pub tied_gru: bool,
    pub variant: ModelVariant,
    pub train_jsonl: PathBuf,
    pub features_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub loss_csv: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            epochs: 1,
            max_steps: 0,
            batch_size: 8,
            learning_rate: 2e-5,
            k: 8,
            gru_hidden: 0,
            model_dim: 64,
            n_heads: 4,
            n_blocks: 2,
            ffn_mult: 4,
            max_len: 128,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_dropout: 0.1,
            tied_gru: false,
            variant: ModelVariant::Full,
            train_jsonl: PathBuf::from("dataset.train.jsonl"),
            features_dir: PathBuf::from("."),
            checkpoint: PathBuf::from("model.antf1"),
            loss_csv: None,
        }
    }
}

fn parse_variant(value: &str) -> Result<ModelVariant> {
    match value {
        "full" => Ok(ModelVariant::Full),
        "gate-closed" => Ok(ModelVariant::GateClosed),
        "mean-pool" => Ok(ModelVariant::MeanPool),
        other => Err(AvqaError::config(format!(
            "unknown variant {other:?} (expected full, gate-closed, or mean-pool)"
        ))),
    }
}

impl TrainConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                AvqaError::config(format!("cannot parse {value:?} for key {key:?}"))
            })
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "gru_hidden" => self.gru_hidden = num(key, value)?,
            "model_dim" => self.model_dim = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "max_len" => self.max_len = num(key, value)?,
            "lora_rank" => self.lora_rank = num(key, value)?,
            "lora_alpha" => self.lora_alpha = num(key, value)?,
            "lora_dropout" => self.lora_dropout = num(key, value)?,
            "tied_gru" => self.tied_gru = num(key, value)?,
            "variant" => self.variant = parse_variant(value)?,
            "train_jsonl" => self.train_jsonl = PathBuf::from(value),
            "features_dir" => self.features_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "loss_csv" => self.loss_csv = Some(PathBuf::from(value)),
            other => {
                return Err(AvqaError::config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Reads a flat config file over the defaults.  Lines are
    /// `key = value`; blank lines and `#` comments are ignored.
    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path).map_err(|e| AvqaError::io(path, e))?;
        let mut config = TrainConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(AvqaError::Malformed {
                    what: "config line",
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: "expected key = value".to_string(),
                });
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Applies CLI overrides of the form `key=value`.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for entry in overrides {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(AvqaError::config(format!(
                    "override {entry:?} is not of the form key=value"
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, usize); 8] = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("k", self.k),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("ffn_mult", self.ffn_mult),
            ("max_len", self.max_len),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(AvqaError::config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(AvqaError::config("learning_rate must be positive".to_string()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(AvqaError::config(format!(
                "model_dim {} must divide evenly into {} heads",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_overrides_layer_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        fs::write(
            &path,
            "# comment\nseed = 11\nlearning_rate = 0.003\nvariant = gate-closed\n",
        )
        .unwrap();
        let mut config = TrainConfig::from_file(&path).unwrap();
        assert_eq!(config.seed, 11);
        assert_eq!(config.variant, ModelVariant::GateClosed);
        assert_eq!(config.batch_size, 8); // untouched default
        config
            .apply_overrides(&["batch_size=4".to_string(), "variant=full".to_string()])
            .unwrap();
        assert_eq!(config.batch_size, 4);
        assert_eq!(config.variant, ModelVariant::Full);
    }

    #[test]
    fn unknown_keys_fail_fast() {
        let mut config = TrainConfig::default();
        let err = config.set("learninng_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("unknown config key"));
        assert!(config.apply_overrides(&["nonsense".to_string()]).is_err());
    }

    #[test]
    fn validation_catches_bad_combinations() {
        let mut config = TrainConfig::default();
        config.model_dim = 62;
        assert!(config.validate().is_err());
        config.model_dim = 64;
        config.learning_rate = 0.0;
        assert!(config.validate().is_err());
    }
}
