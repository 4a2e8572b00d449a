//! Per-frame workflow annotations: JSONL serialization and the seeded
//! synthetic procedure generator.
//!
//! Each video contributes two files to an annotation directory:
//! `video_<id>.jsonl` (one frame record per line) and `video_<id>.feat`
//! (per-frame features, see [`crate::features`]).  Frames are 1 FPS, so one
//! frame equals 1/60 of a minute.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AvqaError, Result};
use crate::features::FeatureTable;
use crate::taxonomy;

/// One annotated frame.  Label fields are optional so that partially
/// annotated external data can still be loaded; QA generation skips frames
/// with missing fields and counts them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FrameAnnotation {
    pub video: String,
    pub frame: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruments: Option<Vec<String>>,
    pub valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mins_left_phase: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mins_left_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mins_left_overall: Option<f64>,
}

/// All frames of one video, sorted by frame index.
#[derive(Debug, Clone)]
pub struct VideoAnnotations {
    pub video: String,
    pub frames: Vec<FrameAnnotation>,
}

/// Formats a numeric video id as the zero-padded two-digit string used in
/// file names and QA records.
pub fn video_id(ordinal: usize) -> String {
    format!("{ordinal:02}")
}

pub fn annotation_path(dir: &Path, video: &str) -> std::path::PathBuf {
    dir.join(format!("video_{video}.jsonl"))
}

pub fn feature_path(dir: &Path, video: &str) -> std::path::PathBuf {
    dir.join(format!("video_{video}.feat"))
}

/// Writes one video's annotations as JSONL (UTF-8, LF endings).
pub fn save_annotations(dir: &Path, video: &VideoAnnotations) -> Result<()> {
    let path = annotation_path(dir, &video.video);
    let mut out = String::new();
    for frame in &video.frames {
        let line = serde_json::to_string(frame).map_err(|e| AvqaError::json(&path, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| AvqaError::io(&path, e))
}

/// Loads every `video_*.jsonl` in a directory, sorted by video id.
pub fn load_annotations(dir: &Path) -> Result<Vec<VideoAnnotations>> {
    let mut by_video: BTreeMap<String, Vec<FrameAnnotation>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| AvqaError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| AvqaError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !(name.starts_with("video_") && name.ends_with(".jsonl")) {
            continue;
        }
        let path = entry.path();
        let text = fs::read_to_string(&path).map_err(|e| AvqaError::io(&path, e))?;
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let frame: FrameAnnotation =
                serde_json::from_str(line).map_err(|e| AvqaError::Malformed {
                    what: "frame annotation",
                    path: path.clone(),
                    line: idx + 1,
                    reason: e.to_string(),
                })?;
            by_video.entry(frame.video.clone()).or_default().push(frame);
        }
    }
    let mut videos = Vec::new();
    for (video, mut frames) in by_video {
        frames.sort_by_key(|f| f.frame);
        videos.push(VideoAnnotations { video, frames });
    }
    Ok(videos)
}

/// Settings for the synthetic procedure generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub videos: usize,
    /// Target video length in minutes; dwell times scale with it.
    pub minutes: f64,
    /// Feature width; the first 20 dims are structured, the rest are noise.
    pub frame_dim: usize,
    /// Probability that a frame is marked invalid (blur/occlusion stand-in).
    pub invalid_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos: 10,
            minutes: 30.0,
            frame_dim: 32,
            invalid_rate: 0.015,
            seed: 17,
        }
    }
}

/// Number of structured (non-noise) feature dimensions.
const STRUCTURED_DIMS: usize = 20;

/// One contiguous run of a single step.
struct StepRun {
    phase: usize,
    step: usize,
    len: usize,
}

/// Samples the run schedule of one procedure.
///
/// The three phases occur in fixed order.  Inside the sellar phase,
/// haemostasis and tumour excision alternate in many short runs so that the
/// identity of the *current* step — and therefore every anticipated label —
/// depends on frame order, not just on which frames appear in a clip.
fn sample_runs(rng: &mut ChaCha8Rng, minutes: f64) -> Vec<StepRun> {
    let scale = minutes / 34.0;
    let mut runs = Vec::new();
    let long = |rng: &mut ChaCha8Rng, phase: usize, step: usize, lo: usize, hi: usize| {
        let raw = rng.gen_range(lo..=hi) as f64;
        StepRun {
            phase,
            step,
            len: (raw * scale).round().max(2.0) as usize,
        }
    };

    // Phase 0: nasal sphenoid, four steps once each.
    for &step in taxonomy::phase_steps(0) {
        runs.push(long(rng, 0, step, 150, 230));
    }

    // Phase 1: sellar.
    runs.push(long(rng, 1, 4, 90, 150)); // sellotomy
    runs.push(long(rng, 1, 7, 60, 120)); // durotomy
    let pairs = ((rng.gen_range(28..=40) as f64) * scale).round().max(4.0) as usize;
    for _ in 0..pairs {
        runs.push(StepRun { phase: 1, step: 5, len: rng.gen_range(4..=9) }); // haemostasis
        runs.push(StepRun { phase: 1, step: 8, len: rng.gen_range(4..=9) }); // tumour excision
    }
    runs.push(long(rng, 1, 6, 50, 90)); // synthetic graft placement
    runs.push(long(rng, 1, 9, 50, 90)); // fat graft placement
    runs.push(long(rng, 1, 10, 40, 80)); // gasket seal construct
    runs.push(long(rng, 1, 11, 40, 80)); // dural sealant

    // Phase 2: closure.
    runs.push(long(rng, 2, 12, 160, 240)); // nasal packing
    runs.push(long(rng, 2, 13, 140, 220)); // debris clearance

    runs
}

fn uniform_noise(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    rng.gen_range(-half_width..=half_width)
}

/// Generates one video's annotations and features.
fn generate_video(spec: &SynthSpec, ordinal: usize) -> (VideoAnnotations, FeatureTable) {
    let video = video_id(ordinal);
    let mut rng = ChaCha8Rng::seed_from_u64(
        avqa_core::decoder::derive_seed(spec.seed, 1000 + ordinal as u64),
    );
    let runs = sample_runs(&mut rng, spec.minutes);

    // Per-frame phase/step indices plus the index of the last frame of the
    // run and phase each frame belongs to.
    let total: usize = runs.iter().map(|r| r.len).sum();
    let mut phase_of = Vec::with_capacity(total);
    let mut step_of = Vec::with_capacity(total);
    let mut run_end = Vec::with_capacity(total);
    let mut cursor = 0usize;
    for run in &runs {
        let end = cursor + run.len - 1;
        for _ in 0..run.len {
            phase_of.push(run.phase);
            step_of.push(run.step);
            run_end.push(end);
        }
        cursor += run.len;
    }
    let mut phase_end = vec![0usize; total];
    for t in (0..total).rev() {
        if t + 1 < total && phase_of[t + 1] == phase_of[t] {
            phase_end[t] = phase_end[t + 1];
        } else {
            phase_end[t] = t;
        }
    }

    let mut frames = Vec::with_capacity(total);
    let mut data = Vec::with_capacity(total * spec.frame_dim);
    for t in 0..total {
        let phase = phase_of[t];
        let step = step_of[t];
        let mins_step = (run_end[t] - t) as f64 / 60.0;
        let mins_phase = (phase_end[t] - t) as f64 / 60.0;
        let mins_overall = (total - 1 - t) as f64 / 60.0;
        let valid = !rng.gen_bool(spec.invalid_rate);
        frames.push(FrameAnnotation {
            video: video.clone(),
            frame: t,
            phase: Some(taxonomy::PHASES[phase].to_string()),
            step: Some(taxonomy::STEPS[step].to_string()),
            instruments: Some(
                taxonomy::step_instruments(step)
                    .iter()
                    .map(|&i| taxonomy::INSTRUMENTS[i].to_string())
                    .collect(),
            ),
            valid,
            mins_left_phase: Some(mins_phase),
            mins_left_step: Some(mins_step),
            mins_left_overall: Some(mins_overall),
        });

        // Class-conditioned prototype features with noise.
        for d in 0..3 {
            let proto = if d == phase { 1.0 } else { 0.0 };
            data.push(proto + uniform_noise(&mut rng, 0.05));
        }
        for d in 0..14 {
            let proto = if d == step { 1.0 } else { 0.0 };
            data.push(proto + uniform_noise(&mut rng, 0.05));
        }
        data.push(mins_step / 5.0 + uniform_noise(&mut rng, 0.02));
        data.push(mins_phase / 15.0 + uniform_noise(&mut rng, 0.02));
        data.push(mins_overall / 30.0 + uniform_noise(&mut rng, 0.02));
        for _ in STRUCTURED_DIMS..spec.frame_dim {
            data.push(uniform_noise(&mut rng, 0.5));
        }
    }

    let features = FeatureTable::new(total, spec.frame_dim, data).expect("sized by construction");
    (VideoAnnotations { video, frames }, features)
}

/// Generates `spec.videos` synthetic procedures into a directory.
/// Deterministic per seed: identical settings produce byte-identical files.
pub fn synth_annotations(spec: &SynthSpec, dir: &Path) -> Result<Vec<String>> {
    if spec.frame_dim < STRUCTURED_DIMS {
        return Err(AvqaError::config(format!(
            "frame_dim must be at least {STRUCTURED_DIMS}, got {}",
            spec.frame_dim
        )));
    }
    if spec.videos == 0 {
        return Err(AvqaError::config("videos must be positive".to_string()));
    }
    fs::create_dir_all(dir).map_err(|e| AvqaError::io(dir, e))?;
    let mut ids = Vec::new();
    for ordinal in 1..=spec.videos {
        let (annotations, features) = generate_video(spec, ordinal);
        save_annotations(dir, &annotations)?;
        features.save(&feature_path(dir, &annotations.video))?;
        ids.push(annotations.video);
    }
    Ok(ids)
}
