//! Weight files: `SPIRE001`, then per tensor a little-endian record
//! (name length, UTF-8 name, rank, dims, f32 data), then the 8-byte config
//! fingerprint.

use std::fs;
use std::path::Path;

use super::config::HrpeConfig;
use super::model::HrpeF;
use crate::error::{Error, Result};
use crate::nn::TensorF;

const MAGIC: &[u8; 8] = b"SPIRE001";

pub fn weights_to_bytes(model: &HrpeF) -> Vec<u8> {
    let mut buf = Vec::from(&MAGIC[..]);
    for p in model.params().iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&model.config().fingerprint().to_le_bytes());
    buf
}

pub fn save_weights(model: &HrpeF, path: &Path) -> Result<()> {
    fs::write(path, weights_to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        // Never read into the trailing fingerprint.
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len() - 8);
        let Some(end) = end else {
            return Err(Error::Corrupt("weight file truncated inside a tensor record".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

/// Parses a weight file image into a model built from `cfg`.
pub fn read_weights_bytes(bytes: &[u8], cfg: &HrpeConfig) -> Result<HrpeF> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Corrupt("not a weight file (bad magic or too short)".into()));
    }
    let mut r = Reader { bytes, pos: 8 };
    let mut records = Vec::new();
    while r.pos < bytes.len() - 8 {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()?;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("tensor {name:?} has implausible rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let data = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name:?} size overflows")))
            .and_then(|n| r.take(n))?;
        let values = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        records.push((name, TensorF::from_vec(&dims, values)?));
    }
    let found = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let expected = cfg.fingerprint();
    if found != expected {
        return Err(Error::Fingerprint { expected, found });
    }
    let mut model = HrpeF::new(cfg)?;
    if records.len() != model.params().len() {
        return Err(Error::Corrupt(format!(
            "weight file has {} tensors, model expects {}",
            records.len(),
            model.params().len()
        )));
    }
    for (p, (name, value)) in model.params_mut().iter_mut().zip(records) {
        if p.name != name || p.value.shape() != value.shape() {
            return Err(Error::Corrupt(format!(
                "tensor {name:?} {:?} does not match model tensor {:?} {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(model)
}

pub fn load_weights(path: &Path, cfg: &HrpeConfig) -> Result<HrpeF> {
    read_weights_bytes(&fs::read(path)?, cfg)
        .map_err(|e| match e {
            Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
            e => e,
        })
}
