//! Shared text normalization.
//!
//! The decoder's tokenizer and every text metric must agree on what a token
//! is, so the rule lives here once: lowercase, then take maximal runs of
//! alphanumeric characters. Punctuation and whitespace both separate tokens
//! and are dropped.

/// Splits into lowercase alphanumeric tokens.
pub fn tokenize_text(s: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            for low in ch.to_lowercase() {
                current.push(low);
            }
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Canonical form: tokens joined by single spaces. Idempotent, and equal to
/// the detokenization of `tokenize_text`.
pub fn normalize(s: &str) -> String {
    tokenize_text(s).join(" ")
}
