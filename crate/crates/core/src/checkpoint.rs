//! Binary checkpoints: the model config as text, then every parameter as
//! 32-bit little-endian floats. The byte layout is described in
//! `docs/checkpoint-format.md`.
//!
//! Saving rounds parameters to `f32`; a checkpoint that is loaded and saved
//! again reproduces the same bytes.

use std::io::Write;
use std::path::Path;

use crate::config::{model_config_from_text, model_config_text};
use crate::error::{Error, Result};
use crate::model::{expected_shapes, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BSAS";
pub const VERSION: u32 = 1;

pub fn to_bytes(cfg: &ModelConfig, weights: &ModelWeights) -> Result<Vec<u8>> {
    weights.check_shapes(cfg)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = model_config_text(cfg);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let named = weights.named();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!(
                    "file ends at byte {} while reading {what} ({n} bytes needed at offset {})",
                    self.bytes.len(),
                    self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

/// Parses a checkpoint; `origin` names the source in error messages.
pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(ModelConfig, ModelWeights)> {
    parse(bytes, origin).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", origin.display())),
        other => other,
    })
}

fn parse(bytes: &[u8], origin: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let text = r.string("config")?;
    let cfg = model_config_from_text(&text, origin)?;
    cfg.validate()?;
    let expected = expected_shapes(&cfg)?;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "config implies {} tensors, file holds {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name = r.string("tensor name")?;
        if &name != want_name {
            return Err(Error::Checkpoint(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        if &shape != want_shape {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {shape:?} does not match config shape {want_shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    let mut weights = ModelWeights::deterministic(&cfg)?;
    for (slot, t) in weights.values_mut().into_iter().zip(tensors) {
        *slot = t;
    }
    Ok((cfg, weights))
}

/// Writes atomically: a temporary sibling is written, then renamed over `path`,
/// so an interrupted save leaves the previous checkpoint intact.
pub fn save(path: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    let bytes = to_bytes(cfg, weights)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
