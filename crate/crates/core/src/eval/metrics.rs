//! Ranking metrics over stemmed keyphrases.

use serde::{Deserialize, Serialize};

use super::porter::{porter_stem, stem_phrase};
use crate::error::{Error, Result};

/// True when both keyphrases stem to the same token sequence.
pub fn keyphrase_match(pred: &str, gold: &str) -> bool {
    stem_phrase(pred) == stem_phrase(gold)
}

/// Number of top-`k` predictions matching a distinct gold.
fn count_matches(preds: &[Vec<String>], golds: &[Vec<String>], k: usize) -> usize {
    let mut used = vec![false; golds.len()];
    let mut hits = 0;
    for p in preds.iter().take(k) {
        if let Some(g) = (0..golds.len()).find(|&g| !used[g] && golds[g] == *p) {
            used[g] = true;
            hits += 1;
        }
    }
    hits
}

fn stem_all(xs: &[String]) -> Vec<Vec<String>> {
    xs.iter().map(|x| stem_phrase(x)).collect()
}

/// Per-post F1 of the top-`k` predictions; `None` without golds.
pub fn f1_at_k(preds: &[String], golds: &[String], k: usize) -> Option<f64> {
    if golds.is_empty() {
        return None;
    }
    let hits = count_matches(&stem_all(preds), &stem_all(golds), k) as f64;
    let shown = k.min(preds.len());
    let p = if shown == 0 { 0.0 } else { hits / shown as f64 };
    let r = hits / golds.len() as f64;
    Some(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// Average precision over the top five predictions; `None` without golds.
pub fn average_precision_at_5(preds: &[String], golds: &[String]) -> Option<f64> {
    if golds.is_empty() {
        return None;
    }
    let (preds, golds) = (stem_all(preds), stem_all(golds));
    let mut used = vec![false; golds.len()];
    let (mut hits, mut total) = (0usize, 0.0);
    for (r, p) in preds.iter().take(5).enumerate() {
        if let Some(g) = (0..golds.len()).find(|&g| !used[g] && golds[g] == *p) {
            used[g] = true;
            hits += 1;
            total += hits as f64 / (r + 1) as f64;
        }
    }
    Some(total / golds.len().min(5) as f64)
}

/// Whether the stemmed gold occurs contiguously in the stemmed text.
pub fn is_present(gold: &str, text: &[String]) -> bool {
    let g = stem_phrase(gold);
    let t: Vec<String> = text.iter().map(|w| porter_stem(w)).collect();
    !g.is_empty() && t.windows(g.len()).any(|w| w == g.as_slice())
}

/// Golds split into (present, absent) with respect to `text`.
pub fn split_present_absent(golds: &[String], text: &[String]) -> (Vec<String>, Vec<String>) {
    golds.iter().cloned().partition(|g| is_present(g, text))
}

/// Share of absent golds found among the top five predictions.
pub fn absent_recall_at_5(preds: &[String], golds: &[String], text: &[String]) -> Option<f64> {
    let (_, absent) = split_present_absent(golds, text);
    if absent.is_empty() {
        return None;
    }
    let hits = count_matches(&stem_all(preds), &stem_all(&absent), 5);
    Some(hits as f64 / absent.len() as f64)
}

/// Predictions and references for one post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostResult {
    pub id: String,
    pub predictions: Vec<String>,
    pub golds: Vec<String>,
    pub text: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub bucket: String,
    pub posts: usize,
    pub f1_at_1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub posts: usize,
    pub f1_at_1: f64,
    pub f1_at_3: f64,
    pub map_at_5: f64,
    /// `None` when no post has a present gold.
    pub present_f1_at_1: Option<f64>,
    /// `None` when no post has an absent gold.
    pub absent_recall_at_5: Option<f64>,
    pub frequency_buckets: Vec<Bucket>,
    pub length_buckets: Vec<Bucket>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

const FREQ_EDGES: [(usize, Option<usize>, &str); 4] = [
    (0, Some(10), "[0,10)"),
    (10, Some(100), "[10,100)"),
    (100, Some(1000), "[100,1000)"),
    (1000, None, "[1000,inf)"),
];

fn length_bucket(len: usize) -> usize {
    match len {
        0..=14 => 0,
        15..=35 => 1,
        _ => 2,
    }
}

const LENGTH_NAMES: [&str; 3] = ["<15", "15-35", ">35"];

/// Full metric suite. `train_count` gives a keyphrase's training
/// frequency. Posts without golds are skipped with a warning.
pub fn evaluate(results: &[PostResult], train_count: impl Fn(&str) -> usize) -> Result<EvalReport> {
    let scored: Vec<&PostResult> = results.iter().filter(|r| !r.golds.is_empty()).collect();
    if scored.len() < results.len() {
        log::warn!("{} posts without gold keyphrases excluded", results.len() - scored.len());
    }
    if scored.is_empty() {
        return Err(Error::validation("data", "no post with gold keyphrases to evaluate"));
    }
    let f1 = |k| mean(scored.iter().filter_map(|r| f1_at_k(&r.predictions, &r.golds, k))).unwrap_or(0.0);
    let map = mean(scored.iter().filter_map(|r| average_precision_at_5(&r.predictions, &r.golds)));
    let present = mean(scored.iter().filter_map(|r| {
        let (present, _) = split_present_absent(&r.golds, &r.text);
        f1_at_k(&r.predictions, &present, 1)
    }));
    let absent = mean(
        scored
            .iter()
            .filter_map(|r| absent_recall_at_5(&r.predictions, &r.golds, &r.text)),
    );

    let mut frequency_buckets = Vec::new();
    for (lo, hi, name) in FREQ_EDGES {
        let scores: Vec<f64> = scored
            .iter()
            .filter_map(|r| {
                let golds: Vec<String> = r
                    .golds
                    .iter()
                    .filter(|g| {
                        let c = train_count(g);
                        c >= lo && hi.is_none_or(|h| c < h)
                    })
                    .cloned()
                    .collect();
                f1_at_k(&r.predictions, &golds, 1)
            })
            .collect();
        if let Some(m) = mean(scores.iter().copied()) {
            frequency_buckets.push(Bucket {
                bucket: name.to_string(),
                posts: scores.len(),
                f1_at_1: m,
            });
        }
    }
    let mut length_buckets = Vec::new();
    for (b, name) in LENGTH_NAMES.iter().enumerate() {
        let scores: Vec<f64> = scored
            .iter()
            .filter(|r| length_bucket(r.text.len()) == b)
            .filter_map(|r| f1_at_k(&r.predictions, &r.golds, 1))
            .collect();
        if let Some(m) = mean(scores.iter().copied()) {
            length_buckets.push(Bucket {
                bucket: name.to_string(),
                posts: scores.len(),
                f1_at_1: m,
            });
        }
    }
    Ok(EvalReport {
        posts: scored.len(),
        f1_at_1: f1(1),
        f1_at_3: f1(3),
        map_at_5: map.unwrap_or(0.0),
        present_f1_at_1: present,
        absent_recall_at_5: absent,
        frequency_buckets,
        length_buckets,
    })
}

impl EvalReport {
    /// Plain-text rendering.
    pub fn table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{:.4}", x));
        let mut s = String::new();
        s.push_str(&format!("posts               {}\n", self.posts));
        s.push_str(&format!("F1@1                {:.4}\n", self.f1_at_1));
        s.push_str(&format!("F1@3                {:.4}\n", self.f1_at_3));
        s.push_str(&format!("MAP@5               {:.4}\n", self.map_at_5));
        s.push_str(&format!("present F1@1        {}\n", opt(self.present_f1_at_1)));
        s.push_str(&format!("absent recall@5     {}\n", opt(self.absent_recall_at_5)));
        for (title, buckets) in [
            ("keyphrase frequency", &self.frequency_buckets),
            ("post length", &self.length_buckets),
        ] {
            s.push_str(&format!("\n{title:<20}posts   F1@1\n"));
            for b in buckets {
                s.push_str(&format!("{:<20}{:<8}{:.4}\n", b.bucket, b.posts, b.f1_at_1));
            }
        }
        s
    }
}
