//! Binary parameter container.
//!
//! Layout (all integers are 64-bit little-endian unsigned):
//!
//! ```text
//! "ATRK1" | count | { name_len | name (UTF-8) | rank | dims[rank] | values[f32 LE; prod(dims)] } * count
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ATRK1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn from_params<T: Real>(params: &ParamStore<T>) -> Self {
        Checkpoint {
            entries: params
                .iter()
                .map(|p| CheckpointEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|x| x.f64() as f32).collect(),
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies every entry of `params` from this checkpoint, by name.
    pub fn restore<T: Real>(&self, params: &mut ParamStore<T>) -> Result<()> {
        for p in params.iter_mut() {
            let e = self
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if e.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    p.name,
                    p.value.shape(),
                    e.shape
                )));
            }
            p.value = Tensor::from_parts(e.shape.clone(), e.values.iter().map(|&v| T::of(v as f64)).collect());
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.shape.len() as u64).to_le_bytes())?;
            for &d in &e.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.values.len() * 4);
            for v in &e.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let count = read_u64(r).map_err(bad)? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = read_u64(r).map_err(bad)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(bad)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u64(r).map_err(bad)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(bad)?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(bad)?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(CheckpointEntry { name, shape, values });
        }
        Ok(Checkpoint { entries })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
