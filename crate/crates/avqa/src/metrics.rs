//! Corpus text metrics (BLEU-1..4, ROUGE-L, METEOR), class accuracy, and
//! remaining-time MAE, plus the aggregate report over a QA item list.
//!
//! All tokenization goes through the same normalizer as the language model
//! so training and evaluation agree on token boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use avqa_core::text::tokenize_text;

use crate::dataset::{GoldLabel, QaItem};
use crate::error::{AvqaError, Result};
use crate::taxonomy;
use crate::templates::{Category, TimeScope};

/// Smoothing value substituted for zero n-gram precision.
pub const BLEU_EPS: f64 = 1e-9;

fn check_aligned(cands: usize, refs: usize) -> Result<()> {
    if cands != refs {
        return Err(AvqaError::config(format!(
            "candidate/reference lists differ in length: {cands} vs {refs}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for start in 0..=tokens.len() - n {
            *counts.entry(&tokens[start..start + n]).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU-n: geometric mean of clipped modified precisions for orders
/// 1..=n with a corpus-level brevity penalty.  A precision with zero matches
/// (or no n-grams at all) is replaced by [`BLEU_EPS`].
pub fn bleu_corpus(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> Result<f64> {
    check_aligned(candidates.len(), references.len())?;
    if !(1..=4).contains(&n) {
        return Err(AvqaError::config(format!("BLEU order must be 1..=4, got {n}")));
    }
    let cand_total: usize = candidates.iter().map(|c| c.len()).sum();
    let ref_total: usize = references.iter().map(|r| r.len()).sum();
    if cand_total == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            total += cand.len().saturating_sub(k - 1);
            let ref_counts = ngram_counts(reference, k);
            for (gram, count) in ngram_counts(cand, k) {
                let limit = ref_counts.get(gram).copied().unwrap_or(0);
                matched += count.min(limit);
            }
        }
        let p = if total > 0 && matched > 0 {
            matched as f64 / total as f64
        } else {
            BLEU_EPS
        };
        log_sum += p.ln();
    }
    let brevity = if cand_total >= ref_total {
        1.0
    } else {
        (1.0 - ref_total as f64 / cand_total as f64).exp()
    };
    Ok(brevity * (log_sum / n as f64).exp())
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut table = vec![0usize; (a.len() + 1) * (b.len() + 1)];
    let stride = b.len() + 1;
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i * stride + j] = if a[i - 1] == b[j - 1] {
                table[(i - 1) * stride + j - 1] + 1
            } else {
                table[(i - 1) * stride + j].max(table[i * stride + j - 1])
            };
        }
    }
    table[a.len() * stride + b.len()]
}

/// LCS-based F-score with balanced weighting: F = 2PR / (P+R).
pub fn rouge_l_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean pair score; the second value counts empty candidates (scored 0).
pub fn rouge_l_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<(f64, usize)> {
    check_aligned(candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Err(AvqaError::config("ROUGE-L over an empty corpus".to_string()));
    }
    let mut warnings = 0;
    let mut sum = 0.0;
    for (cand, reference) in candidates.iter().zip(references) {
        if cand.is_empty() {
            warnings += 1;
        }
        sum += rouge_l_pair(cand, reference);
    }
    Ok((sum / candidates.len() as f64, warnings))
}

// ---------------------------------------------------------------------------
// METEOR (exact-match unigram variant)
// ---------------------------------------------------------------------------

/// Most matchable positions per side the exact chunk search accepts.
const METEOR_MATCHABLE_CAP: usize = 16;

/// Maximum unigram matches: sum over token types of min(count, count).
fn meteor_max_matches(cand: &[String], reference: &[String]) -> usize {
    let mut cand_counts: HashMap<&String, usize> = HashMap::new();
    for token in cand {
        *cand_counts.entry(token).or_default() += 1;
    }
    let mut ref_counts: HashMap<&String, usize> = HashMap::new();
    for token in reference {
        *ref_counts.entry(token).or_default() += 1;
    }
    cand_counts
        .iter()
        .map(|(token, c)| (*c).min(ref_counts.get(*token).copied().unwrap_or(0)))
        .sum()
}

/// Minimal chunk count over all alignments achieving the maximum number of
/// matches.  Dynamic program over (used-position mask on the smaller side,
/// position of the previous match), scanning the other side left to right.
fn minimal_chunks(cand: &[String], reference: &[String], target: usize) -> usize {
    // Mask the side with fewer matchable positions; scan the other.
    let cand_matchable = cand.iter().filter(|t| reference.contains(t)).count();
    let ref_matchable = reference.iter().filter(|t| cand.contains(t)).count();
    let (scan, masked) = if ref_matchable <= cand_matchable {
        (cand, reference)
    } else {
        (reference, cand)
    };
    // Matchable positions of the masked side, with original indices.
    let slots: Vec<(usize, &String)> = masked
        .iter()
        .enumerate()
        .filter(|(_, t)| scan.contains(t))
        .collect();
    assert!(
        slots.len() <= METEOR_MATCHABLE_CAP,
        "exact chunk minimization supports at most {METEOR_MATCHABLE_CAP} matchable positions, got {}",
        slots.len()
    );

    const NO_PREV: u32 = u32::MAX;
    // State: (used slot mask, original masked index of a match at the
    // immediately preceding scan position, +1; NO_PREV if it was unmatched).
    // Value: (matches, chunks), maximizing matches then minimizing chunks.
    let mut states: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
    states.insert((0, NO_PREV), (0, 0));
    let better = |a: (u32, u32), b: (u32, u32)| -> (u32, u32) {
        if b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
            b
        } else {
            a
        }
    };
    for token in scan {
        let mut next: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
        for (&(mask, _prev), &(matches, chunks)) in &states {
            // Leaving this scan position unmatched breaks any run.
            let entry = next.entry((mask, NO_PREV)).or_insert((0, u32::MAX));
            *entry = better(*entry, (matches, chunks));
        }
        for (&(mask, prev), &(matches, chunks)) in &states {
            for (slot, &(orig, slot_token)) in slots.iter().enumerate() {
                if mask & (1 << slot) != 0 || slot_token != token {
                    continue;
                }
                let continues = prev != NO_PREV && prev as usize == orig; // prev holds orig+1
                let cost = if continues { 0 } else { 1 };
                let key = (mask | (1 << slot), orig as u32 + 1);
                let entry = next.entry(key).or_insert((0, u32::MAX));
                *entry = better(*entry, (matches + 1, chunks + cost));
            }
        }
        states = next;
    }
    states
        .values()
        .filter(|(m, _)| *m as usize == target)
        .map(|(_, c)| *c as usize)
        .min()
        .expect("an alignment with the maximum matches exists")
}

/// Exact-match METEOR: F_mean = 10PR/(R+9P), penalty = 0.5·(chunks/matches)³.
pub fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    let m = meteor_max_matches(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let chunks = minimal_chunks(candidate, reference, m) as f64;
    let m = m as f64;
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    f_mean * (1.0 - 0.5 * (chunks / m).powi(3))
}

/// Mean pair score; the second value counts empty candidates (scored 0).
pub fn meteor_corpus(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
) -> Result<(f64, usize)> {
    check_aligned(candidates.len(), references.len())?;
    if candidates.is_empty() {
        return Err(AvqaError::config("METEOR over an empty corpus".to_string()));
    }
    let mut empties = 0;
    let mut sum = 0.0;
    for (cand, reference) in candidates.iter().zip(references) {
        if cand.is_empty() {
            empties += 1;
        }
        sum += meteor_pair(cand, reference);
    }
    Ok((sum / candidates.len() as f64, empties))
}

// ---------------------------------------------------------------------------
// Class extraction and accuracy
// ---------------------------------------------------------------------------

fn contains_phrase(haystack: &[String], phrase: &str) -> bool {
    let needle: Vec<String> = tokenize_text(phrase);
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle.as_slice())
}

fn family(category: Category) -> &'static [&'static str] {
    match category {
        Category::FuturePhase => &taxonomy::PHASES,
        Category::FutureStep => &taxonomy::STEPS,
        Category::FutureInstrument => &taxonomy::INSTRUMENTS,
        Category::Time => &[],
    }
}

/// All classes of a family mentioned as contiguous token phrases.
pub fn mentioned_classes(answer: &str, category: Category) -> BTreeSet<String> {
    let tokens = tokenize_text(answer);
    family(category)
        .iter()
        .filter(|class| contains_phrase(&tokens, class))
        .map(|class| class.to_string())
        .collect()
}

/// The single class an answer commits to, if it names exactly one.
pub fn extract_class(answer: &str, category: Category) -> Option<String> {
    let classes = mentioned_classes(answer, category);
    if classes.len() == 1 {
        classes.into_iter().next()
    } else {
        None
    }
}

/// Exact-match accuracy.  For instruments the mentioned set must equal the
/// gold set; for phases and steps the answer must name exactly the gold
/// class and no other.
pub fn category_accuracy(predictions: &[String], golds: &[String], category: Category) -> f64 {
    if predictions.is_empty() || predictions.len() != golds.len() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(pred, gold)| match category {
            Category::FutureInstrument => {
                let pred_set = mentioned_classes(pred, category);
                let gold_set = mentioned_classes(gold, category);
                !gold_set.is_empty() && pred_set == gold_set
            }
            _ => extract_class(pred, category).as_deref() == Some(gold.as_str()),
        })
        .count();
    correct as f64 / predictions.len() as f64
}

// ---------------------------------------------------------------------------
// Remaining-time MAE
// ---------------------------------------------------------------------------

/// First integer or decimal literal in raw text, if any.
pub fn parse_first_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            return text[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

/// Mean absolute error in minutes over parseable predictions.
/// Returns (mae, scored, unparseable); errors when nothing parses.
pub fn time_mae(predictions: &[String], gold_minutes: &[f64]) -> Result<(f64, usize, usize)> {
    check_aligned(predictions.len(), gold_minutes.len())?;
    let mut scored = 0usize;
    let mut unparseable = 0usize;
    let mut sum = 0.0;
    for (pred, gold) in predictions.iter().zip(gold_minutes) {
        match parse_first_number(pred) {
            Some(value) => {
                scored += 1;
                sum += (value - gold).abs();
            }
            None => unparseable += 1,
        }
    }
    if scored == 0 {
        return Err(AvqaError::MetricUndefined(format!(
            "no parseable time predictions among {} items",
            predictions.len()
        )));
    }
    Ok((sum / scored as f64, scored, unparseable))
}

// ---------------------------------------------------------------------------
// Aggregate report
// ---------------------------------------------------------------------------

/// Fluency metrics over one slice of the corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub scored: usize,
    /// Empty-candidate pairs (scored as 0 by ROUGE/METEOR).
    pub skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub future_instrument: Option<f64>,
    pub future_step: Option<f64>,
    pub future_phase: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScopeMae {
    pub mae: Option<f64>,
    pub scored: usize,
    pub unparseable: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaeReport {
    pub phase: ScopeMae,
    pub step: ScopeMae,
    pub overall: ScopeMae,
}

/// Full evaluation report: text metrics per category and overall, class
/// accuracies, and time MAE per scope.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: TextScores,
    pub per_category: BTreeMap<String, TextScores>,
    pub accuracy: AccuracyReport,
    pub mae_minutes: MaeReport,
    pub scored_count: usize,
    pub unparseable_count: usize,
}

fn text_scores(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<TextScores> {
    let (rouge_l, skipped) = rouge_l_corpus(cands, refs)?;
    let (meteor, _) = meteor_corpus(cands, refs)?;
    Ok(TextScores {
        bleu1: bleu_corpus(cands, refs, 1)?,
        bleu2: bleu_corpus(cands, refs, 2)?,
        bleu3: bleu_corpus(cands, refs, 3)?,
        bleu4: bleu_corpus(cands, refs, 4)?,
        rouge_l,
        meteor,
        scored: cands.len(),
        skipped,
    })
}

/// Scores aligned predictions against gold items.
pub fn evaluate(golds: &[QaItem], predictions: &[String]) -> Result<MetricReport> {
    check_aligned(predictions.len(), golds.len())?;
    if golds.is_empty() {
        return Err(AvqaError::config("cannot evaluate an empty item list".to_string()));
    }

    let all_cands: Vec<Vec<String>> = predictions.iter().map(|p| tokenize_text(p)).collect();
    let all_refs: Vec<Vec<String>> = golds.iter().map(|g| tokenize_text(&g.answer)).collect();

    let mut per_category = BTreeMap::new();
    for category in [
        Category::FuturePhase,
        Category::FutureStep,
        Category::FutureInstrument,
        Category::Time,
    ] {
        let indices: Vec<usize> = golds
            .iter()
            .enumerate()
            .filter(|(_, g)| g.category == category)
            .map(|(i, _)| i)
            .collect();
        if indices.is_empty() {
            continue;
        }
        let cands: Vec<Vec<String>> = indices.iter().map(|&i| all_cands[i].clone()).collect();
        let refs: Vec<Vec<String>> = indices.iter().map(|&i| all_refs[i].clone()).collect();
        per_category.insert(category.as_str().to_string(), text_scores(&cands, &refs)?);
    }

    let mut accuracy = AccuracyReport {
        future_instrument: None,
        future_step: None,
        future_phase: None,
    };
    for category in [Category::FuturePhase, Category::FutureStep, Category::FutureInstrument] {
        let mut preds = Vec::new();
        let mut gold_classes = Vec::new();
        for (gold, pred) in golds.iter().zip(predictions) {
            if gold.category == category {
                if let GoldLabel::Class(c) = &gold.label {
                    preds.push(pred.clone());
                    gold_classes.push(c.clone());
                }
            }
        }
        if preds.is_empty() {
            continue;
        }
        let value = category_accuracy(&preds, &gold_classes, category);
        match category {
            Category::FuturePhase => accuracy.future_phase = Some(value),
            Category::FutureStep => accuracy.future_step = Some(value),
            Category::FutureInstrument => accuracy.future_instrument = Some(value),
            Category::Time => unreachable!(),
        }
    }

    let mut mae_minutes = MaeReport {
        phase: ScopeMae { mae: None, scored: 0, unparseable: 0 },
        step: ScopeMae { mae: None, scored: 0, unparseable: 0 },
        overall: ScopeMae { mae: None, scored: 0, unparseable: 0 },
    };
    let mut unparseable_count = 0;
    for scope in [TimeScope::Phase, TimeScope::Step, TimeScope::Overall] {
        let mut preds = Vec::new();
        let mut minutes = Vec::new();
        for (gold, pred) in golds.iter().zip(predictions) {
            if let GoldLabel::Minutes { scope: s, minutes: m } = &gold.label {
                if *s == scope {
                    preds.push(pred.clone());
                    minutes.push(*m);
                }
            }
        }
        if preds.is_empty() {
            continue;
        }
        let (mae, scored, unparseable) = time_mae(&preds, &minutes)?;
        unparseable_count += unparseable;
        let slot = ScopeMae { mae: Some(mae), scored, unparseable };
        match scope {
            TimeScope::Phase => mae_minutes.phase = slot,
            TimeScope::Step => mae_minutes.step = slot,
            TimeScope::Overall => mae_minutes.overall = slot,
        }
    }

    Ok(MetricReport {
        overall: text_scores(&all_cands, &all_refs)?,
        per_category,
        accuracy,
        mae_minutes,
        scored_count: golds.len(),
        unparseable_count,
    })
}

fn fmt_pct(value: Option<f64>) -> String {
    match value {
        Some(v) => format!("{:6.2}", v * 100.0),
        None => "     -".to_string(),
    }
}

fn fmt_mae(slot: &ScopeMae) -> String {
    match slot.mae {
        Some(v) => format!("{v:6.2} ({} scored, {} unparseable)", slot.scored, slot.unparseable),
        None => "     - (no items)".to_string(),
    }
}

/// Human-readable rendering with scores ×100.
pub fn format_report(report: &MetricReport) -> String {
    let mut out = String::new();
    let line = |name: &str, s: &TextScores| {
        format!(
            "{name:<18} B-1 {:6.2}  B-2 {:6.2}  B-3 {:6.2}  B-4 {:6.2}  R-L {:6.2}  MET {:6.2}  (n={})\n",
            s.bleu1 * 100.0,
            s.bleu2 * 100.0,
            s.bleu3 * 100.0,
            s.bleu4 * 100.0,
            s.rouge_l * 100.0,
            s.meteor * 100.0,
            s.scored
        )
    };
    out.push_str(&line("overall", &report.overall));
    for (name, scores) in &report.per_category {
        out.push_str(&line(name, scores));
    }
    out.push_str(&format!(
        "accuracy %        phase {}  step {}  instrument {}\n",
        fmt_pct(report.accuracy.future_phase),
        fmt_pct(report.accuracy.future_step),
        fmt_pct(report.accuracy.future_instrument),
    ));
    out.push_str(&format!(
        "mae minutes       phase {}\n                  step {}\n                  overall {}\n",
        fmt_mae(&report.mae_minutes.phase),
        fmt_mae(&report.mae_minutes.step),
        fmt_mae(&report.mae_minutes.overall),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(|w| w.to_string()).collect()
    }

    #[test]
    fn softmaxed_smoothing_keeps_identity_exact() {
        let corpus = vec![words("alpha bravo charlie delta echo")];
        assert_eq!(bleu_corpus(&corpus, &corpus, 4).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_punishes_short_candidates() {
        let cands = vec![words("alpha bravo")];
        let refs = vec![words("alpha bravo charlie delta")];
        let expected = (1.0f64 - 2.0).exp(); // p1 = 1, BP = exp(1 - 4/2)
        assert!((bleu_corpus(&cands, &refs, 1).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn chunk_search_handles_repeated_tokens() {
        let cand = words("alpha alpha bravo");
        let reference = words("alpha bravo alpha");
        // matches 3; best alignment keeps "alpha bravo" contiguous: 2 chunks.
        let m: f64 = 3.0;
        let f_mean = 10.0 / 10.0; // P = R = 1
        let expected = f_mean * (1.0 - 0.5 * (2.0 / m).powi(3));
        assert!((meteor_pair(&cand, &reference) - expected).abs() < 1e-12);
    }

    #[test]
    fn extraction_requires_contiguity() {
        assert_eq!(
            extract_class("the next phase will be nasal sphenoid", Category::FuturePhase),
            Some("nasal sphenoid".to_string())
        );
        // "nasal ... sphenoid" split across other words is not a mention.
        assert_eq!(
            extract_class("nasal passage near the sphenoid bone", Category::FuturePhase),
            None
        );
    }

    #[test]
    fn number_parsing_rules() {
        assert_eq!(parse_first_number("23 minutes"), Some(23.0));
        assert_eq!(parse_first_number("about 13.5, maybe 14"), Some(13.5));
        assert_eq!(parse_first_number("trailing dot 7."), Some(7.0));
        assert_eq!(parse_first_number("none"), None);
    }

    #[test]
    fn report_counts_are_consistent_per_scope() {
        use crate::dataset::GoldLabel;
        use crate::dataset::QaItem;
        let golds = vec![
            QaItem {
                video: "01".into(),
                t_end: 9,
                k: 4,
                category: Category::Time,
                question: "how many minutes remain in the current phase?".into(),
                answer: "3 minutes remain in this phase".into(),
                label: GoldLabel::Minutes { scope: TimeScope::Phase, minutes: 3.2 },
            },
            QaItem {
                video: "01".into(),
                t_end: 9,
                k: 4,
                category: Category::FuturePhase,
                question: "what surgical phase will come after the current one?".into(),
                answer: "the next phase will be closure".into(),
                label: GoldLabel::Class("closure".into()),
            },
        ];
        let preds = vec![
            "4 minutes remain in this phase".to_string(),
            "the next phase will be closure".to_string(),
        ];
        let report = evaluate(&golds, &preds).unwrap();
        assert_eq!(report.scored_count, 2);
        assert_eq!(report.mae_minutes.phase.scored + report.mae_minutes.phase.unparseable, 1);
        assert!((report.mae_minutes.phase.mae.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(report.accuracy.future_phase, Some(1.0));
        assert!(report.per_category.contains_key("time"));
        let printed = format_report(&report);
        assert!(printed.contains("overall"));
        assert!(printed.contains("100.00"));
    }
}
