//! Binary checkpoints: `MMKC`, version, vocabulary hashes, then one record
//! per parameter (name, rank, extents, little-endian `f32` values).

use std::fs;
use std::path::Path;

use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MMKC";
const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes all parameters at 32-bit precision.
pub fn encode<T: Scalar>(model: &Model<T>, vocab: &Vocabulary) -> Result<Vec<u8>> {
    let (gh, ch) = vocab.hashes();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    buf.extend_from_slice(&gh);
    buf.extend_from_slice(&ch);
    for (_, name, t) in model.params().iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut buf, e)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, encode(model, vocab)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Rebuilds a model from checkpoint bytes. Refuses checkpoints written for
/// a different vocabulary and requires every parameter exactly once.
pub fn decode<T: Scalar>(bytes: &[u8], config: ModelConfig, vocab: &Vocabulary) -> Result<Model<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let (gh, ch) = vocab.hashes();
    if r.take(32)? != gh || r.take(32)? != ch {
        return Err(Error::Checkpoint(
            "vocabulary hash mismatch: checkpoint was trained with a different vocabulary".into(),
        ));
    }
    let mut model = Model::<T>::new(config, vocab.gen.len(), vocab.cls.len(), 0)?;
    let mut seen = vec![false; model.params().len()];
    while r.pos < bytes.len() {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("parameter `{name}` repeated")));
        }
        model
            .params_mut()
            .set(id, Tensor::new(shape, data)?)
            .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let id = model.params().ids().nth(i).expect("in range");
        return Err(Error::Checkpoint(format!(
            "parameter `{}` missing",
            model.params().name(id)
        )));
    }
    Ok(model)
}

pub fn load<T: Scalar>(path: &Path, config: ModelConfig, vocab: &Vocabulary) -> Result<Model<T>> {
    decode(&fs::read(path)?, config, vocab)
}
