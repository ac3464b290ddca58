//! Token normalisation for social-media text.

use super::vocab::{MENTION, NUMBER, URL};

fn is_placeholder(tok: &str) -> bool {
    tok == URL || tok == MENTION || tok == NUMBER
}

fn is_url(tok: &str) -> bool {
    let t = tok.to_ascii_lowercase();
    t.starts_with("http://") || t.starts_with("https://") || t.starts_with("www.")
}

/// Lowercases tokens, maps links, mentions and digit-only tokens to
/// placeholders and drops every other non-alphabetic token.
///
/// The output may be empty; callers filter posts without text.
pub fn normalize_tokens<S: AsRef<str>>(raw: &[S]) -> Vec<String> {
    raw.iter()
        .filter_map(|tok| {
            let tok = tok.as_ref();
            if is_placeholder(tok) {
                Some(tok.to_string())
            } else if is_url(tok) {
                Some(URL.to_string())
            } else if tok.len() > 1 && tok.starts_with('@') {
                Some(MENTION.to_string())
            } else if !tok.is_empty() && tok.chars().all(|c| c.is_ascii_digit()) {
                Some(NUMBER.to_string())
            } else {
                let lower = tok.to_lowercase();
                (!lower.is_empty() && lower.chars().all(char::is_alphabetic)).then_some(lower)
            }
        })
        .collect()
}

/// Canonical keyphrase string: lowercase tokens joined by single spaces.
pub fn canonical_keyphrase(kp: &str) -> String {
    kp.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
