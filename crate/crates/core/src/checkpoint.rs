//! Parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "CMML"
//! version u32            (currently 1)
//! count   u64
//! count × {
//!     name_len u32, name bytes (UTF-8)
//!     rank u32, dims u64 × rank
//!     payload f64 × product(dims)
//! }
//! ```
//!
//! The file ends right after the last payload; trailing bytes are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMML";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint parameter name is not valid UTF-8")]
    InvalidName,
    #[error("checkpoint lists parameter `{0}` twice")]
    DuplicateName(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint contains unknown parameter `{0}`")]
    UnknownParameter(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
        for &d in t.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(what))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = c.u64("parameter count")?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_owned();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName(name));
        }
        let rank = c.u32("rank")? as usize;
        // Each dim needs 8 bytes; bail out before allocating for a corrupt rank.
        if rank.saturating_mul(8) > c.remaining() {
            return Err(CheckpointError::Truncated("dims"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u64("dims")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated("payload"))?;
        let payload = c.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated("payload"))?, "payload")?;
        let data = payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(&dims, data).expect("length checked above");
        out.push(NamedTensor { name, tensor });
    }
    if c.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(c.remaining()));
    }
    Ok(out)
}

/// Writes every parameter of `store` whose name passes `filter`.
pub fn save_store(store: &ParamStore, path: &Path, filter: impl Fn(&str) -> bool) -> Result<(), CheckpointError> {
    let tensors: Vec<NamedTensor> = store
        .iter()
        .filter(|(_, p)| filter(&p.name))
        .map(|(_, p)| NamedTensor {
            name: p.name.clone(),
            tensor: p.value.clone(),
        })
        .collect();
    fs::write(path, encode(&tensors))?;
    Ok(())
}

/// Loads a checkpoint into an already constructed store. Every stored tensor
/// must name an existing parameter of the same shape, and every parameter
/// passing `filter` must be present.
pub fn load_store(store: &mut ParamStore, path: &Path, filter: impl Fn(&str) -> bool) -> Result<(), CheckpointError> {
    let tensors = decode(&fs::read(path)?)?;
    for t in &tensors {
        let id = store
            .id(&t.name)
            .ok_or_else(|| CheckpointError::UnknownParameter(t.name.clone()))?;
        let expected = store.value(id).shape();
        if expected != t.tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                expected: expected.to_vec(),
                found: t.tensor.shape().to_vec(),
            });
        }
    }
    let names: HashSet<&str> = tensors.iter().map(|t| t.name.as_str()).collect();
    if let Some((_, missing)) = store.iter().find(|(_, p)| filter(&p.name) && !names.contains(p.name.as_str())) {
        return Err(CheckpointError::MissingParameter(missing.name.clone()));
    }
    for t in tensors {
        let id = store.id(&t.name).expect("checked above");
        store.get_mut(id).value = t.tensor;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "gen.head.w".into(),
                tensor: Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap(),
            },
            NamedTensor {
                name: "latents.H_img".into(),
                tensor: Tensor::scalar(0.1),
            },
        ]
    }

    #[test]
    fn layout_header_is_documented_one() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"CMML");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 10);
        assert_eq!(&bytes[20..30], b"gen.head.w");
        // name, rank, 2 dims, 6 payload values, then the second record
        assert_eq!(bytes.len(), 16 + (4 + 10 + 4 + 16 + 48) + (4 + 13 + 4 + 8));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let tensors = sample();
        let back = decode(&encode(&tensors)).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in tensors.iter().zip(&back) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor));
        }
    }

    #[test]
    fn corrupt_files_are_classified() {
        let bytes = encode(&sample());
        assert!(matches!(decode(&[]), Err(CheckpointError::Truncated("magic"))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(CheckpointError::UnsupportedVersion(9))));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CheckpointError::TrailingBytes(1))));
        let mut bad = bytes;
        bad[35] = 0xFF; // high byte of the first dim
        assert!(matches!(decode(&bad), Err(CheckpointError::Truncated(_))));
    }
}
