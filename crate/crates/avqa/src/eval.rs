//! Batch prediction and scoring: generates answers for gold items, stores
//! them as JSONL, aligns prediction and gold files, and produces a
//! [`MetricReport`](crate::metrics::MetricReport).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use avqa_core::model::Model;

use crate::dataset::QaItem;
use crate::error::{AvqaError, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::templates::Category;
use crate::train::{make_sample, TrainingData};

/// Default cap on generated answer length, in tokens.
pub const DEFAULT_MAX_NEW: usize = 24;

/// One predicted answer, keyed like the gold record it answers.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Prediction {
    pub video: String,
    pub t_end: usize,
    pub k: usize,
    pub category: Category,
    pub question: String,
    pub answer: String,
}

/// Greedy generation for every gold item, in order.
pub fn predict_items(
    model: &Model,
    golds: &[QaItem],
    data: &TrainingData,
    max_new: usize,
) -> Result<Vec<Prediction>> {
    let mut predictions = Vec::with_capacity(golds.len());
    for item in golds {
        let sample = make_sample(item, data, &model.vocab)?;
        let (ids, _fusion) =
            model.generate(&sample.question_ids, &sample.frames, sample.t_len, max_new)?;
        predictions.push(Prediction {
            video: item.video.clone(),
            t_end: item.t_end,
            k: item.k,
            category: item.category,
            question: item.question.clone(),
            answer: model.vocab.decode(&ids),
        });
    }
    Ok(predictions)
}

pub fn save_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        let line = serde_json::to_string(p).map_err(|e| AvqaError::json(path, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| AvqaError::io(path, e))
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| AvqaError::io(path, e))?;
    let mut predictions = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction = serde_json::from_str(line).map_err(|e| AvqaError::Malformed {
            what: "prediction",
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        predictions.push(p);
    }
    Ok(predictions)
}

/// Checks that predictions line up one-to-one with gold items and returns
/// the answer strings in gold order.
pub fn align(golds: &[QaItem], predictions: &[Prediction]) -> Result<Vec<String>> {
    if golds.len() != predictions.len() {
        return Err(AvqaError::config(format!(
            "prediction count {} does not match gold count {}",
            predictions.len(),
            golds.len()
        )));
    }
    for (index, (gold, pred)) in golds.iter().zip(predictions).enumerate() {
        let matches = gold.video == pred.video
            && gold.t_end == pred.t_end
            && gold.k == pred.k
            && gold.category == pred.category
            && gold.question == pred.question;
        if !matches {
            return Err(AvqaError::config(format!(
                "prediction {index} answers {}:{} {:?}, gold expects {}:{} {:?}",
                pred.video,
                pred.t_end,
                pred.question,
                gold.video,
                gold.t_end,
                gold.question
            )));
        }
    }
    Ok(predictions.iter().map(|p| p.answer.clone()).collect())
}

/// Scores a prediction file against a gold file.
pub fn score_files(pred_path: &Path, gold_path: &Path) -> Result<MetricReport> {
    let golds = crate::dataset::load_items(gold_path)?;
    let predictions = load_predictions(pred_path)?;
    let answers = align(&golds, &predictions)?;
    evaluate(&golds, &answers)
}

/// Teacher-forced answer-token accuracy over items: fraction of answer
/// positions (including the end-of-sequence token) where the model's argmax
/// equals the target.
pub fn token_accuracy(model: &Model, golds: &[QaItem], data: &TrainingData) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for item in golds {
        let sample = make_sample(item, data, &model.vocab)?;
        let (c, t) = model.token_match(&sample)?;
        correct += c;
        total += t;
    }
    if total == 0 {
        return Err(AvqaError::config("no answer tokens to score".to_string()));
    }
    Ok(correct as f64 / total as f64)
}
