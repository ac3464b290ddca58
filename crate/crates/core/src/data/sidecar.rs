//! Binary visual-feature sidecar: `MMKP`, version, count, rows, dim, then
//! little-endian `f32` values in dataset line order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMKP";
const VERSION: u32 = 1;

type Matrix = Vec<Vec<f32>>;

fn u32_at(buf: &[u8], off: usize) -> Result<u32> {
    buf.get(off..off + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::validation("visual_features", "truncated sidecar header"))
}

pub fn read(path: &Path) -> Result<Vec<Matrix>> {
    let buf = fs::read(path)?;
    if buf.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::validation("visual_features", "sidecar magic mismatch"));
    }
    let version = u32_at(&buf, 4)?;
    if version != VERSION {
        return Err(Error::validation(
            "visual_features",
            format!("unsupported sidecar version {version}"),
        ));
    }
    let count = u32_at(&buf, 8)? as usize;
    let rows = u32_at(&buf, 12)? as usize;
    let dim = u32_at(&buf, 16)? as usize;
    let body = &buf[20..];
    if body.len() != count * rows * dim * 4 {
        return Err(Error::validation(
            "visual_features",
            format!("sidecar body has {} bytes, expected {}", body.len(), count * rows * dim * 4),
        ));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    Ok((0..count)
        .map(|_| {
            (0..rows)
                .map(|_| values.by_ref().take(dim).collect())
                .collect()
        })
        .collect())
}

/// Writes matrices that all share one shape.
pub fn write(path: &Path, mats: &[Matrix]) -> Result<()> {
    let rows = mats.first().map_or(0, Vec::len);
    let dim = mats.first().and_then(|m| m.first()).map_or(0, Vec::len);
    if mats
        .iter()
        .any(|m| m.len() != rows || m.iter().any(|r| r.len() != dim))
    {
        return Err(Error::dim("sidecar matrices must share one shape"));
    }
    let mut buf = Vec::with_capacity(20 + mats.len() * rows * dim * 4);
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, mats.len() as u32, rows as u32, dim as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in mats.iter().flatten().flatten() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}
