//! Brute-force oracle implementations of the text metrics, kept independent
//! of the library code, shared by the oracle-equivalence and acceptance
//! suites.  Everything here favors obviousness over speed: linear n-gram
//! scans, recursive LCS, and exhaustive alignment enumeration.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHABET: [&str; 12] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliet",
    "kilo", "lima",
];

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(|w| w.to_string()).collect()
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> Vec<String> {
    let len = rng.gen_range(1..=8);
    (0..len)
        .map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())].to_string())
        .collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let pairs = rng.gen_range(4..=8);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..pairs {
        cands.push(random_sentence(rng));
        refs.push(random_sentence(rng));
    }
    (cands, refs)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Oracle: corpus BLEU by explicit n-gram list scanning.
// ---------------------------------------------------------------------------

/// Collects distinct n-grams with counts by linear scanning (no hashing).
pub fn gram_counts<'a>(tokens: &'a [String], n: usize) -> Vec<(&'a [String], usize)> {
    let mut out: Vec<(&[String], usize)> = Vec::new();
    if tokens.len() < n {
        return out;
    }
    for start in 0..=tokens.len() - n {
        let gram = &tokens[start..start + n];
        match out.iter_mut().find(|(g, _)| *g == gram) {
            Some((_, c)) => *c += 1,
            None => out.push((gram, 1)),
        }
    }
    out
}

pub const BLEU_EPS: f64 = 1e-9;

pub fn oracle_bleu(cands: &[Vec<String>], refs: &[Vec<String>], n: usize) -> f64 {
    let cand_total: usize = cands.iter().map(|c| c.len()).sum();
    let ref_total: usize = refs.iter().map(|r| r.len()).sum();
    if cand_total == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (cand, reference) in cands.iter().zip(refs) {
            total += cand.len().saturating_sub(k - 1);
            let ref_counts = gram_counts(reference, k);
            for (gram, count) in gram_counts(cand, k) {
                let limit = ref_counts
                    .iter()
                    .find(|(g, _)| *g == gram)
                    .map(|(_, c)| *c)
                    .unwrap_or(0);
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
    brevity * (log_sum / n as f64).exp()
}

// ---------------------------------------------------------------------------
// Oracle: LCS by recursion with memoization.
// ---------------------------------------------------------------------------

pub fn lcs_recursive(
    a: &[String],
    b: &[String],
    i: usize,
    j: usize,
    memo: &mut Vec<Vec<i64>>,
) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if memo[i][j] >= 0 {
        return memo[i][j] as usize;
    }
    let best = if a[i] == b[j] {
        1 + lcs_recursive(a, b, i + 1, j + 1, memo)
    } else {
        lcs_recursive(a, b, i + 1, j, memo).max(lcs_recursive(a, b, i, j + 1, memo))
    };
    memo[i][j] = best as i64;
    best
}

pub fn oracle_rouge_l(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut memo = vec![vec![-1i64; reference.len()]; cand.len()];
    let lcs = lcs_recursive(cand, reference, 0, 0, &mut memo) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

// ---------------------------------------------------------------------------
// Oracle: METEOR by exhaustive alignment enumeration.
// ---------------------------------------------------------------------------

/// Maximum achievable unigram matches: sum over types of min count.
pub fn max_matches(cand: &[String], reference: &[String]) -> usize {
    let mut seen: Vec<&String> = Vec::new();
    let mut total = 0;
    for token in cand {
        if seen.contains(&token) {
            continue;
        }
        seen.push(token);
        let in_cand = cand.iter().filter(|t| *t == token).count();
        let in_ref = reference.iter().filter(|t| *t == token).count();
        total += in_cand.min(in_ref);
    }
    total
}

pub fn chunk_count(pairs: &[(usize, usize)]) -> usize {
    let mut chunks = 0;
    for (idx, (i, j)) in pairs.iter().enumerate() {
        let continues = idx > 0 && pairs[idx - 1].0 + 1 == *i && pairs[idx - 1].1 + 1 == *j;
        if !continues {
            chunks += 1;
        }
    }
    chunks
}

/// Tries every injective alignment reaching `target` matches and returns the
/// minimum chunk count over them.
pub fn enumerate_alignments(
    cand: &[String],
    reference: &[String],
    pos: usize,
    used: &mut Vec<bool>,
    pairs: &mut Vec<(usize, usize)>,
    target: usize,
    best: &mut Option<usize>,
) {
    // Even matching every remaining candidate token cannot reach the target.
    if pairs.len() + (cand.len() - pos) < target {
        return;
    }
    if pos == cand.len() {
        if pairs.len() == target {
            let chunks = chunk_count(pairs);
            *best = Some(best.map_or(chunks, |b: usize| b.min(chunks)));
        }
        return;
    }
    for j in 0..reference.len() {
        if !used[j] && reference[j] == cand[pos] {
            used[j] = true;
            pairs.push((pos, j));
            enumerate_alignments(cand, reference, pos + 1, used, pairs, target, best);
            pairs.pop();
            used[j] = false;
        }
    }
    enumerate_alignments(cand, reference, pos + 1, used, pairs, target, best);
}

pub fn oracle_meteor(cand: &[String], reference: &[String]) -> f64 {
    let m = max_matches(cand, reference);
    if m == 0 {
        return 0.0;
    }
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let mut best = None;
    enumerate_alignments(cand, reference, 0, &mut used, &mut pairs, m, &mut best);
    let chunks = best.expect("an alignment with the maximum matches exists") as f64;
    let m = m as f64;
    let p = m / cand.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks / m).powi(3);
    f_mean * (1.0 - penalty)
}
