//! Clip windowing, anticipation QA generation, video-level splitting, and
//! the JSONL dataset format.
//!
//! Every QA item is anchored at the last frame of a clip: class questions ask
//! what comes *after* the state at that frame, and time questions ask how
//! many minutes remain at that frame.  Answers are rendered from templates,
//! so each answer is exactly reconstructible from (template, gold label).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::{FrameAnnotation, VideoAnnotations};
use crate::error::{AvqaError, Result};
use crate::taxonomy;
use crate::templates::{Category, Template, TimeScope};

/// A window of `k` consecutive valid frames ending at `t_end`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clip {
    pub video: String,
    pub t_end: usize,
    pub k: usize,
}

impl Clip {
    /// First frame index of the window.
    pub fn t_start(&self) -> usize {
        self.t_end + 1 - self.k
    }
}

/// Gold label attached to a QA item: a class phrase, or minutes with scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldLabel {
    Class(String),
    Minutes { scope: TimeScope, minutes: f64 },
}

/// One dataset record.  Field order matches the JSONL schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaItem {
    pub video: String,
    pub t_end: usize,
    pub k: usize,
    pub category: Category,
    pub question: String,
    pub answer: String,
    pub label: GoldLabel,
}

/// Sliding valid windows of length `k`, stride 1, within one video.
///
/// Frames must be sorted by index.  A window qualifies when its `k` frame
/// indices are consecutive and every frame is valid.
pub fn build_clips(video: &VideoAnnotations, k: usize) -> Result<Vec<Clip>> {
    if k < 1 {
        return Err(AvqaError::config(format!("clip length must be >= 1, got {k}")));
    }
    let frames = &video.frames;
    let mut clips = Vec::new();
    if frames.len() < k {
        return Ok(clips);
    }
    for window in frames.windows(k) {
        let contiguous = window
            .windows(2)
            .all(|pair| pair[1].frame == pair[0].frame + 1);
        let all_valid = window.iter().all(|f| f.valid);
        if contiguous && all_valid {
            clips.push(Clip {
                video: video.video.clone(),
                t_end: window[k - 1].frame,
                k,
            });
        }
    }
    Ok(clips)
}

/// What comes next after each frame of a video, resolved by forward scan.
#[derive(Debug, Clone, Default)]
pub struct NextState {
    /// Phase of the first later frame with a different phase, if any.
    pub phase: Option<String>,
    /// Step of the first later frame with a different step, if any.
    pub step: Option<String>,
    /// Instrument set recorded at the first frame of that next step.
    pub step_instruments: Option<Vec<String>>,
}

/// Computes [`NextState`] for every frame.  Frames with missing labels do
/// not terminate a span; the scan simply looks further ahead.
pub fn scan_next_states(frames: &[FrameAnnotation]) -> Vec<NextState> {
    let n = frames.len();
    let mut out = vec![NextState::default(); n];
    for t in 0..n {
        let current_phase = frames[t].phase.as_deref();
        let current_step = frames[t].step.as_deref();
        if current_phase.is_some() {
            out[t].phase = frames[t + 1..]
                .iter()
                .find(|f| f.phase.is_some() && f.phase.as_deref() != current_phase)
                .and_then(|f| f.phase.clone());
        }
        if current_step.is_some() {
            if let Some(next) = frames[t + 1..]
                .iter()
                .find(|f| f.step.is_some() && f.step.as_deref() != current_step)
            {
                out[t].step = next.step.clone();
                out[t].step_instruments = next.instruments.clone();
            }
        }
    }
    out
}

/// Per-item generation outcome counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QaWarnings {
    /// Templates skipped because a required annotation field was missing.
    pub missing_field: usize,
    /// Instrument templates skipped because no further step follows.
    pub instrument_tail: usize,
}

/// Renders minutes as the integer phrase used in answers, round-half-up.
pub fn render_minutes(minutes: f64) -> String {
    format!("{} minutes", (minutes + 0.5).floor() as i64)
}

/// Generates one QA item per applicable template for a clip whose last frame
/// is `last`, given that frame's [`NextState`].
pub fn generate_qa(
    clip: &Clip,
    last: &FrameAnnotation,
    next: &NextState,
    templates: &[Template],
    warnings: &mut QaWarnings,
) -> Vec<QaItem> {
    let mut items = Vec::new();
    for template in templates {
        let rendered: Option<(String, GoldLabel)> = match template.category {
            Category::FuturePhase => {
                if last.phase.is_none() {
                    warnings.missing_field += 1;
                    continue;
                }
                let class = next
                    .phase
                    .clone()
                    .unwrap_or_else(|| taxonomy::PHASES[taxonomy::PHASE_TAIL].to_string());
                Some((class.clone(), GoldLabel::Class(class)))
            }
            Category::FutureStep => {
                if last.step.is_none() {
                    warnings.missing_field += 1;
                    continue;
                }
                let class = next
                    .step
                    .clone()
                    .unwrap_or_else(|| taxonomy::STEPS[taxonomy::STEP_TAIL].to_string());
                Some((class.clone(), GoldLabel::Class(class)))
            }
            Category::FutureInstrument => {
                if last.step.is_none() {
                    warnings.missing_field += 1;
                    continue;
                }
                if next.step.is_none() {
                    warnings.instrument_tail += 1;
                    continue;
                }
                match &next.step_instruments {
                    Some(instruments) => {
                        let mut sorted: Vec<&str> =
                            instruments.iter().map(String::as_str).collect();
                        sorted.sort_by_key(|name| {
                            taxonomy::INSTRUMENTS
                                .iter()
                                .position(|i| i == name)
                                .unwrap_or(taxonomy::INSTRUMENTS.len())
                        });
                        sorted.dedup();
                        let class = sorted.join(", ");
                        Some((class.clone(), GoldLabel::Class(class)))
                    }
                    None => {
                        warnings.missing_field += 1;
                        continue;
                    }
                }
            }
            Category::Time => {
                let scope = template.scope.expect("time template carries a scope");
                let minutes = match scope {
                    TimeScope::Phase => last.mins_left_phase,
                    TimeScope::Step => last.mins_left_step,
                    TimeScope::Overall => last.mins_left_overall,
                };
                match minutes {
                    Some(m) => Some((render_minutes(m), GoldLabel::Minutes { scope, minutes: m })),
                    None => {
                        warnings.missing_field += 1;
                        continue;
                    }
                }
            }
        };
        if let Some((slot, label)) = rendered {
            items.push(QaItem {
                video: clip.video.clone(),
                t_end: clip.t_end,
                k: clip.k,
                category: template.category,
                question: template.question.clone(),
                answer: template.render(&slot),
                label,
            });
        }
    }
    items
}

/// Dataset-level statistics emitted next to the JSONL output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub videos: usize,
    pub frames: usize,
    pub valid_frames: usize,
    pub clips: usize,
    pub qa_total: usize,
    pub qa_train: usize,
    pub qa_test: usize,
    pub per_category: BTreeMap<String, usize>,
    pub time_fraction: f64,
    pub missing_field_warnings: usize,
    pub instrument_tail_skips: usize,
}

/// Generates QA items for every valid clip of every video, in canonical
/// order: (video id, t_end, category declaration order, template order).
pub fn build_qa_items(
    videos: &[VideoAnnotations],
    k: usize,
    templates: &[Template],
) -> Result<(Vec<QaItem>, DatasetStats)> {
    let mut items = Vec::new();
    let mut warnings = QaWarnings::default();
    let mut frames = 0;
    let mut valid_frames = 0;
    let mut clips = 0;
    for video in videos {
        frames += video.frames.len();
        valid_frames += video.frames.iter().filter(|f| f.valid).count();
        let next_states = scan_next_states(&video.frames);
        let index_of: BTreeMap<usize, usize> = video
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| (f.frame, i))
            .collect();
        for clip in build_clips(video, k)? {
            clips += 1;
            let slot = index_of[&clip.t_end];
            items.extend(generate_qa(
                &clip,
                &video.frames[slot],
                &next_states[slot],
                templates,
                &mut warnings,
            ));
        }
    }
    // Videos arrive sorted and clips are scanned in t_end order, so a stable
    // sort on category alone finishes the canonical ordering.
    items.sort_by(|a, b| {
        (&a.video, a.t_end, a.category).cmp(&(&b.video, b.t_end, b.category))
    });

    let mut per_category: BTreeMap<String, usize> = BTreeMap::new();
    for item in &items {
        *per_category.entry(item.category.as_str().to_string()).or_default() += 1;
    }
    let time_count = per_category.get("time").copied().unwrap_or(0);
    let stats = DatasetStats {
        videos: videos.len(),
        frames,
        valid_frames,
        clips,
        qa_total: items.len(),
        qa_train: 0,
        qa_test: 0,
        per_category,
        time_fraction: if items.is_empty() {
            0.0
        } else {
            time_count as f64 / items.len() as f64
        },
        missing_field_warnings: warnings.missing_field,
        instrument_tail_skips: warnings.instrument_tail,
    };
    Ok((items, stats))
}

/// Splits items by video id.  Every id in `test_videos` must name a known
/// video, otherwise the split silently tests on nothing.
pub fn split_by_video(
    items: Vec<QaItem>,
    test_videos: &[String],
    known_videos: &[String],
) -> Result<(Vec<QaItem>, Vec<QaItem>)> {
    for id in test_videos {
        if !known_videos.contains(id) {
            return Err(AvqaError::config(format!(
                "test video {id:?} not present in the dataset (known: {known_videos:?})"
            )));
        }
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for item in items {
        if test_videos.contains(&item.video) {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    Ok((train, test))
}

/// Writes items as JSONL (UTF-8, LF line endings).
pub fn save_items(path: &Path, items: &[QaItem]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| AvqaError::json(path, e))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| AvqaError::io(path, e))
}

/// Loads a JSONL item file.
pub fn load_items(path: &Path) -> Result<Vec<QaItem>> {
    let text = fs::read_to_string(path).map_err(|e| AvqaError::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: QaItem = serde_json::from_str(line).map_err(|e| AvqaError::Malformed {
            what: "qa item",
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}
