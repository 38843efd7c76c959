//! Versioned binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"EAAW"
//! version  u32
//! spec     u32 length + UTF-8 model config text
//! params   u32 count, then per parameter:
//!          u32 name length + name, u32 rank, rank x u64 dims, f32 values
//! bn       u32 count, then per layer:
//!          u32 name length + name, u32 channels, f64 means, f64 variances
//! ```

use std::fs;
use std::path::Path;

use crate::autograd::Module;
use crate::backbone::{build_model, Model};
use crate::config::{model_from_text, model_to_text};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"EAAW";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode<F: Float>(model: &Model<F>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model_to_text(&model.spec));
    let params = model.param_list();
    put_u32(&mut out, params.len());
    for p in params {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.shape().len());
        for &d in p.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let bns = model.batch_norms();
    put_u32(&mut out, bns.len());
    for (name, stats) in bns {
        put_str(&mut out, name);
        let (mean, var) = stats.snapshot();
        put_u32(&mut out, mean.len());
        for v in mean.iter().chain(&var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save<F: Float>(model: &Model<F>, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("weights truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n.checked_mul(8).ok_or_else(|| Error::Format("buffer too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("name is not UTF-8".into()))
    }
}

/// Rebuild the model described by the file and fill in its parameters and
/// batch-norm statistics. Names and shapes must match the rebuilt model.
pub fn decode<F: Float>(bytes: &[u8]) -> Result<Model<F>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a weights file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let spec = model_from_text(&r.string()?)?;
    let mut model = build_model::<F>(&spec, 0)?;
    let count = r.u32()?;
    let mut params = model.param_list_mut();
    if count != params.len() {
        return Err(Error::Format(format!(
            "file holds {count} parameters, model expects {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::Format(format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if shape != p.shape() {
            return Err(Error::Format(format!("`{name}` has shape {shape:?}, expected {:?}", p.shape())));
        }
        let vals = r.f32s(shape.iter().product())?;
        p.value = Tensor::from_vec(&shape, vals.into_iter().map(|v| F::of(v as f64)).collect())?;
    }
    drop(params);
    let bn_count = r.u32()?;
    let bns = model.batch_norms();
    if bn_count != bns.len() {
        return Err(Error::Format(format!("file holds {bn_count} batch norms, model expects {}", bns.len())));
    }
    for (name, stats) in bns {
        let got = r.string()?;
        if got != name {
            return Err(Error::Format(format!("expected batch norm `{name}`, found `{got}`")));
        }
        let c = r.u32()?;
        if c != stats.channels() {
            return Err(Error::Format(format!("`{name}` has {c} channels, expected {}", stats.channels())));
        }
        let mean = r.f64s(c)?;
        let var = r.f64s(c)?;
        stats.set(mean, var);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn load<F: Float>(path: &Path) -> Result<Model<F>> {
    decode(&fs::read(path)?)
}
