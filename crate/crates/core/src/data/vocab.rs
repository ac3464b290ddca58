//! Generation and classification vocabularies.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::post::Post;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const SEP: &str = "<sep>";
pub const URL: &str = "<url>";
pub const MENTION: &str = "<mention>";
pub const NUMBER: &str = "<number>";

/// Reserved generation tokens, in id order.
pub const RESERVED: [&str; 8] = [PAD, BOS, EOS, UNK, SEP, URL, MENTION, NUMBER];

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const SEP_ID: usize = 4;

/// Token ↔ id map for the generation vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::validation(
                    "gen",
                    format!("reserved token {r} must have id {i}"),
                ));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::validation("gen", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id_or_unk(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

/// Keyphrase string ↔ label id map, with training occurrence counts.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVocab {
    labels: Vec<String>,
    counts: Vec<usize>,
    index: HashMap<String, usize>,
}

impl LabelVocab {
    pub fn new(labels: Vec<String>, counts: Vec<usize>) -> Result<Self> {
        if labels.len() != counts.len() {
            return Err(Error::validation("cls", "labels and counts differ in length"));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::validation("cls", format!("duplicate label `{l}`")));
            }
        }
        Ok(Self {
            labels,
            counts,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Training occurrences of `label` (0 for unseen labels).
    pub fn count(&self, label: &str) -> usize {
        self.id(label).map_or(0, |i| self.counts[i])
    }
}

/// Both vocabularies of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub gen: TokenVocab,
    pub cls: LabelVocab,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    label: String,
    count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    gen: Vec<String>,
    cls: Vec<LabelEntry>,
}

fn digest<'a>(items: impl Iterator<Item = &'a String>) -> [u8; 32] {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.as_bytes());
        h.update(*b"\n");
    }
    h.finalize().into()
}

impl Vocabulary {
    /// SHA-256 of the generation tokens and of the classification labels.
    pub fn hashes(&self) -> ([u8; 32], [u8; 32]) {
        (
            digest(self.gen.tokens.iter()),
            digest(self.cls.labels.iter()),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            gen: self.gen.tokens.clone(),
            cls: self
                .cls
                .labels
                .iter()
                .zip(&self.cls.counts)
                .map(|(l, &c)| LabelEntry {
                    label: l.clone(),
                    count: c,
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let (labels, counts) = file.cls.into_iter().map(|e| (e.label, e.count)).unzip();
        Ok(Self {
            gen: TokenVocab::from_tokens(file.gen)?,
            cls: LabelVocab::new(labels, counts)?,
        })
    }
}

fn sorted_by_count(counts: HashMap<String, usize>) -> Vec<(String, usize)> {
    let mut items: Vec<(String, usize)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items
}

/// Builds both vocabularies from training posts.
///
/// `gen_cap` bounds the total generation vocabulary size, reserved tokens
/// included. Regular tokens are drawn from text, OCR, attributes and
/// keyphrase tokens by descending count, ties broken lexicographically;
/// tokens seen fewer than `min_count` times are skipped.
pub fn build_vocab(posts: &[Post], gen_cap: usize, min_count: usize) -> Result<Vocabulary> {
    if posts.is_empty() {
        return Err(Error::validation("posts", "cannot build a vocabulary from an empty corpus"));
    }
    if gen_cap < RESERVED.len() {
        return Err(Error::validation(
            "gen_cap",
            format!("must be at least {} (reserved tokens)", RESERVED.len()),
        ));
    }
    let mut token_counts: HashMap<String, usize> = HashMap::new();
    let mut label_counts: HashMap<String, usize> = HashMap::new();
    for p in posts {
        let kp_tokens = p.keyphrases.iter().flat_map(|k| k.split_whitespace());
        for t in p
            .text
            .iter()
            .chain(&p.ocr)
            .chain(&p.attributes)
            .map(String::as_str)
            .chain(kp_tokens)
        {
            *token_counts.entry(t.to_string()).or_default() += 1;
        }
        for k in &p.keyphrases {
            *label_counts.entry(k.clone()).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    for (tok, count) in sorted_by_count(token_counts) {
        if tokens.len() >= gen_cap {
            break;
        }
        if count < min_count.max(1) || RESERVED.contains(&tok.as_str()) {
            continue;
        }
        tokens.push(tok);
    }
    let (labels, counts) = sorted_by_count(label_counts).into_iter().unzip();
    Ok(Vocabulary {
        gen: TokenVocab::from_tokens(tokens)?,
        cls: LabelVocab::new(labels, counts)?,
    })
}
