//! Dataset records and JSON-lines I/O.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::normalize::{canonical_keyphrase, normalize_tokens};
use super::sidecar;
use crate::error::{Error, Result};

pub const MAX_ATTRIBUTES: usize = 5;

/// One multimedia post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Post {
    pub id: String,
    pub text: Vec<String>,
    pub ocr: Vec<String>,
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_features: Option<Vec<Vec<f32>>>,
    pub keyphrases: Vec<String>,
}

/// Expected extents of visual feature matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisualShape {
    pub rows: usize,
    pub dim: usize,
}

#[derive(Clone, Debug, Default)]
pub struct LoadOptions<'a> {
    /// When set, every visual matrix must have exactly this shape.
    pub visual: Option<VisualShape>,
    /// Binary feature file whose entries follow the dataset line order.
    pub sidecar: Option<&'a Path>,
}

fn invalid(line: usize, field: &str, msg: impl std::fmt::Display) -> Error {
    Error::validation(field, format!("line {line}: {msg}"))
}

fn check_raw(p: &Post, line: usize, shape: Option<VisualShape>) -> Result<()> {
    if p.attributes.len() > MAX_ATTRIBUTES {
        return Err(invalid(
            line,
            "attributes",
            format_args!("{} attributes, at most {MAX_ATTRIBUTES} allowed", p.attributes.len()),
        ));
    }
    if p.keyphrases.is_empty() {
        return Err(invalid(line, "keyphrases", "post has no keyphrase"));
    }
    if p.keyphrases.iter().any(|k| k.split_whitespace().next().is_none()) {
        return Err(invalid(line, "keyphrases", "empty keyphrase"));
    }
    if let Some(rows) = &p.visual_features {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(invalid(line, "visual_features", "ragged or empty matrix"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid(line, "visual_features", "non-finite value"));
        }
        if let Some(s) = shape {
            if rows.len() != s.rows || dim != s.dim {
                return Err(invalid(
                    line,
                    "visual_features",
                    format_args!("shape {}x{dim}, expected {}x{}", rows.len(), s.rows, s.dim),
                ));
            }
        }
    }
    Ok(())
}

/// Normalizes tokens and keyphrases in place. Returns false when the
/// post is left without text.
fn normalize_post(p: &mut Post) -> bool {
    p.text = normalize_tokens(&p.text);
    p.ocr = normalize_tokens(&p.ocr);
    p.attributes = normalize_tokens(&p.attributes);
    p.keyphrases = p.keyphrases.iter().map(|k| canonical_keyphrase(k)).collect();
    !p.text.is_empty()
}

/// Reads a JSON-lines dataset, validates every record and normalizes its
/// tokens. Posts whose text normalizes to nothing are dropped.
pub fn load_dataset(path: &Path, opts: &LoadOptions<'_>) -> Result<Vec<Post>> {
    let content = fs::read_to_string(path)?;
    let mut posts = Vec::new();
    for (i, raw) in content.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let post: Post = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        posts.push((i + 1, post));
    }
    if let Some(sc) = opts.sidecar {
        let mats = sidecar::read(sc)?;
        if mats.len() != posts.len() {
            return Err(Error::validation(
                "visual_features",
                format!("sidecar has {} entries for {} posts", mats.len(), posts.len()),
            ));
        }
        for ((_, p), m) in posts.iter_mut().zip(mats) {
            p.visual_features = Some(m);
        }
    }
    let mut out = Vec::with_capacity(posts.len());
    let mut dropped = 0usize;
    for (line, mut p) in posts {
        check_raw(&p, line, opts.visual)?;
        if normalize_post(&mut p) {
            out.push(p);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} posts with empty text", path.display());
    }
    Ok(out)
}

/// Writes posts as JSON lines.
pub fn write_dataset(path: &Path, posts: &[Post]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in posts {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Removes keyphrases seen fewer than `min_count` times across `posts`,
/// then drops posts left without keyphrases.
pub fn filter_rare_keyphrases(posts: Vec<Post>, min_count: usize) -> Vec<Post> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for p in &posts {
        for k in &p.keyphrases {
            *counts.entry(k.clone()).or_default() += 1;
        }
    }
    posts
        .into_iter()
        .filter_map(|mut p| {
            p.keyphrases.retain(|k| counts[k] >= min_count);
            (!p.keyphrases.is_empty()).then_some(p)
        })
        .collect()
}
