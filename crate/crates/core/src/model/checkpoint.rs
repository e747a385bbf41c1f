use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ParamStore, ViLConfig};
use crate::tensor::Tensor;
use crate::{Real, Result, VilError};

const MAGIC: &[u8; 8] = b"VILCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// SHA-256 of the canonical JSON encoding of the config.
pub fn config_digest(cfg: &ViLConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(&json));
    out
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| VilError::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Writes all parameters as little-endian f32.
pub fn save_checkpoint<T: Real>(path: impl AsRef<Path>, cfg: &ViLConfig, params: &ParamStore<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(params.num_scalars() * 4 + 1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&config_digest(cfg));
    put_u32(&mut buf, params.len())?;
    for (name, t) in params.names().zip(params.tensors()) {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &e in t.shape() {
            put_u32(&mut buf, e)?;
        }
        for x in t.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let path = path.as_ref();
    fs::write(path, buf).map_err(|e| VilError::from(e).context(format!("writing {}", path.display())))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            VilError::Format(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Reads the stored config digest and every entry.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<([u8; 32], Vec<CheckpointEntry>)> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| VilError::from(e).context(format!("reading {}", path.display())))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(VilError::Format(format!("{} is not a VILCKPT1 checkpoint", path.display())));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| VilError::Format("parameter name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| VilError::Format(format!("{name}: extent overflow")))?;
        let bytes = r.take(n.checked_mul(4).ok_or_else(|| VilError::Format("payload overflow".into()))?)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(CheckpointEntry { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(VilError::Format(format!(
            "{} trailing bytes after the last entry",
            buf.len() - r.pos
        )));
    }
    Ok((digest, entries))
}

/// Loads parameters for `cfg`, rejecting checkpoints written for another
/// config or with a different layout.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>, cfg: &ViLConfig) -> Result<ParamStore<T>> {
    let (digest, entries) = read_checkpoint(&path)?;
    if digest != config_digest(cfg) {
        return Err(VilError::Format(
            "checkpoint was written for a different model config".into(),
        ));
    }
    let specs = super::layout(cfg)?;
    if specs.len() != entries.len() {
        return Err(VilError::Format(format!(
            "checkpoint has {} tensors, config expects {}",
            entries.len(),
            specs.len()
        )));
    }
    let tensors = specs
        .iter()
        .zip(entries)
        .map(|(s, e)| {
            if s.name != e.name || s.shape != e.shape {
                return Err(VilError::Format(format!(
                    "entry {} {:?} does not match expected {} {:?}",
                    e.name, e.shape, s.name, s.shape
                )));
            }
            Tensor::new(e.shape, e.data.into_iter().map(|x| T::lit(x as f64)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    ParamStore::from_tensors(cfg, tensors)
}
