//! Training loop: Adam over the trainable parameters, per-sample graphs
//! with batch gradient accumulation, a loss CSV, and checkpointing with a
//! JSON metadata sidecar describing the model and vocabulary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use avqa_core::checkpoint;
use avqa_core::decoder::{derive_seed, Vocab};
use avqa_core::model::{Model, ModelConfig, Sample};

use crate::config::TrainConfig;
use crate::dataset::{load_items, QaItem};
use crate::error::{AvqaError, Result};
use crate::features::FeatureTable;

/// Adam with bias correction, state keyed by parameter name.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One update over named parameters.  Parameters without a gradient
    /// entry are left untouched.
    pub fn update(
        &mut self,
        params: &mut [&mut avqa_core::Param],
        grads: &BTreeMap<String, Vec<f64>>,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        for param in params.iter_mut() {
            let Some(grad) = grads.get(&param.name) else {
                continue;
            };
            let m = self
                .first_moment
                .entry(param.name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            let v = self
                .second_moment
                .entry(param.name.clone())
                .or_insert_with(|| vec![0.0; param.data.len()]);
            for i in 0..param.data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                param.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Checkpoint sidecar: everything needed to rebuild the model around the
/// raw tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub vocab: Vocab,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    checkpoint.with_file_name(name)
}

/// Writes tensors plus the metadata sidecar.
pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    checkpoint::save(path, &model.all_params())?;
    let meta = CheckpointMeta {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| AvqaError::json(path, e))?;
    let sidecar = meta_path(path);
    fs::write(&sidecar, json).map_err(|e| AvqaError::io(&sidecar, e))
}

/// Rebuilds a model from a checkpoint and its sidecar.
pub fn load_model(path: &Path) -> Result<Model> {
    let sidecar = meta_path(path);
    let text = fs::read_to_string(&sidecar).map_err(|e| AvqaError::io(&sidecar, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| AvqaError::json(&sidecar, e))?;
    let mut model = Model::new(meta.config, meta.vocab, 0)?;
    let tensors = checkpoint::load(path)?;
    model.load_state(tensors)?;
    Ok(model)
}

/// Items plus the per-video feature tables they reference.
pub struct TrainingData {
    pub items: Vec<QaItem>,
    pub features: BTreeMap<String, FeatureTable>,
    pub frame_dim: usize,
}

/// Loads a JSONL item file and every feature table it references.
pub fn load_training_data(jsonl: &Path, features_dir: &Path) -> Result<TrainingData> {
    let items = load_items(jsonl)?;
    if items.is_empty() {
        return Err(AvqaError::config(format!("{} holds no items", jsonl.display())));
    }
    let mut features = BTreeMap::new();
    for item in &items {
        if !features.contains_key(&item.video) {
            let path = crate::annotations::feature_path(features_dir, &item.video);
            features.insert(item.video.clone(), FeatureTable::load(&path)?);
        }
    }
    let frame_dim = features.values().next().expect("nonempty").dim;
    for (video, table) in &features {
        if table.dim != frame_dim {
            return Err(AvqaError::config(format!(
                "feature width mismatch: video {video} has D={}, expected {frame_dim}",
                table.dim
            )));
        }
    }
    Ok(TrainingData { items, features, frame_dim })
}

/// Builds the model input for one item.
pub fn make_sample(item: &QaItem, data: &TrainingData, vocab: &Vocab) -> Result<Sample> {
    let table = data
        .features
        .get(&item.video)
        .ok_or_else(|| AvqaError::config(format!("no features for video {}", item.video)))?;
    if item.k < 1 || item.t_end + 1 < item.k || item.t_end >= table.frames {
        return Err(AvqaError::config(format!(
            "clip [{}..{}] out of range for video {} with {} frames",
            item.t_end as i64 - item.k as i64 + 1,
            item.t_end,
            item.video,
            table.frames
        )));
    }
    let start = item.t_end + 1 - item.k;
    Ok(Sample {
        question_ids: vocab.encode(&item.question),
        answer_ids: vocab.encode(&item.answer),
        frames: table.window(start, item.t_end),
        t_len: item.k,
    })
}

/// Builds the token table from the training items' questions and answers.
pub fn build_vocab(items: &[QaItem]) -> Vocab {
    let mut texts = Vec::with_capacity(items.len() * 2);
    for item in items {
        texts.push(item.question.as_str());
        texts.push(item.answer.as_str());
    }
    Vocab::build(texts)
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub steps: usize,
    pub final_loss: f64,
}

/// Builds the freshly initialized model exactly as `train` would for this
/// config and data (same vocabulary, dimensions, and init seed).
pub fn build_model(config: &TrainConfig, data: &TrainingData) -> Result<Model> {
    let vocab = build_vocab(&data.items);
    let model_config = ModelConfig {
        frame_dim: data.frame_dim,
        gru_hidden: if config.gru_hidden == 0 { data.frame_dim } else { config.gru_hidden },
        model_dim: config.model_dim,
        n_heads: config.n_heads,
        ffn_mult: config.ffn_mult,
        n_blocks: config.n_blocks,
        max_len: config.max_len,
        lora_rank: config.lora_rank,
        lora_alpha: config.lora_alpha,
        lora_dropout: config.lora_dropout,
        tied_gru: config.tied_gru,
        variant: config.variant,
    };
    Ok(Model::new(model_config, vocab, derive_seed(config.seed, 1))?)
}

/// Runs the training loop described by `config`.  Deterministic given
/// (seed, config, data): repeating a run produces byte-identical
/// checkpoints and loss CSVs.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_training_data(&config.train_jsonl, &config.features_dir)?;
    for item in &data.items {
        if item.k != config.k {
            return Err(AvqaError::config(format!(
                "dataset clip length {} does not match configured k {}",
                item.k, config.k
            )));
        }
    }
    let mut model = build_model(config, &data)?;

    let mut optimizer = Adam::new(config.learning_rate);
    let mut csv = String::from("step,epoch,loss,lr\n");
    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    let mut sample_counter = 0u64;

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 100 + epoch as u64));
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &index in batch {
                let item = &data.items[index];
                let sample = make_sample(item, &data, &model.vocab)?;
                let dropout_seed = derive_seed(config.seed, 10_000 + sample_counter);
                sample_counter += 1;
                let (mut graph, loss, bindings) = model.loss_graph(&sample, true, dropout_seed)?;
                let loss_value = graph.data(loss)[0];
                if !loss_value.is_finite() {
                    let ids: Vec<String> = batch
                        .iter()
                        .map(|&i| {
                            let it = &data.items[i];
                            format!("{}:{}:{}", it.video, it.t_end, it.category.as_str())
                        })
                        .collect();
                    return Err(AvqaError::Diverged {
                        step,
                        loss: loss_value,
                        batch: ids.join(", "),
                    });
                }
                batch_loss += loss_value;
                graph.backward(loss)?;
                bindings.collect_grads(&graph, &mut grads)?;
            }
            let scale = 1.0 / batch.len() as f64;
            for grad in grads.values_mut() {
                for g in grad.iter_mut() {
                    *g *= scale;
                }
            }
            batch_loss *= scale;

            let mut trainable = model.trainable_params_mut();
            optimizer.update(&mut trainable, &grads);
            step += 1;
            final_loss = batch_loss;
            csv.push_str(&format!(
                "{step},{epoch},{batch_loss:.12},{}\n",
                config.learning_rate
            ));
            if config.max_steps > 0 && step >= config.max_steps {
                break 'epochs;
            }
        }
        save_model(&config.checkpoint, &model)?;
    }
    save_model(&config.checkpoint, &model)?;
    if let Some(csv_path) = &config.loss_csv {
        fs::write(csv_path, &csv).map_err(|e| AvqaError::io(csv_path, e))?;
    }
    Ok(TrainOutcome { model, steps: step, final_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use avqa_core::Param;

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut param = Param::zeros("w", &[2]);
        param.data = vec![1.0, -1.0];
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.5, -0.5]);
        let mut adam = Adam::new(0.1);
        let before = param.data.clone();
        {
            let mut refs = vec![&mut param];
            adam.update(&mut refs, &grads);
        }
        assert!(param.data[0] < before[0]);
        assert!(param.data[1] > before[1]);
    }

    #[test]
    fn adam_skips_parameters_without_gradients() {
        let mut param = Param::zeros("w", &[1]);
        param.data = vec![3.0];
        let grads = BTreeMap::new();
        let mut adam = Adam::new(0.1);
        let mut refs = vec![&mut param];
        adam.update(&mut refs, &grads);
        assert_eq!(param.data, vec![3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // With bias correction, the first update is lr * g/(|g| + eps·…) ≈ lr.
        let mut param = Param::zeros("w", &[1]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.25]);
        let mut adam = Adam::new(0.01);
        let mut refs = vec![&mut param];
        adam.update(&mut refs, &grads);
        assert!((param.data[0] + 0.01).abs() < 1e-6);
    }

    #[test]
    fn meta_path_appends_suffix() {
        assert_eq!(
            meta_path(Path::new("/tmp/run/model.antf1")),
            PathBuf::from("/tmp/run/model.antf1.meta.json")
        );
    }
}
