//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "MIPOCKPT"
//! version      u32      = 1
//! vocab_size   u32
//! d_model      u32
//! n_layers     u32
//! d_ff         u32
//! context_len  u32
//! seed         u64
//! n_tensors    u32
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u32 each)
//!   count      u64, values (f64 each)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelConfig, TinyLm};

pub const MAGIC: &[u8; 8] = b"MIPOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor set mismatch: expected {expected} tensors, found {found}")]
    TensorCount { expected: usize, found: usize },
    #[error("checkpoint has trailing bytes")]
    TrailingBytes,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub fn to_bytes(model: &TinyLm) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(64 + model.params.count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [c.vocab_size, c.d_model, c.n_layers, c.d_ff, c.context_len] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        if end > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TinyLm, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        d_ff: dims[3],
        context_len: dims[4],
        seed: r.u64()?,
    };
    let mut model = TinyLm::new(config).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let n = r.u32()? as usize;
    if n != model.params.len() {
        return Err(CheckpointError::TensorCount {
            expected: model.params.len(),
            found: n,
        });
    }
    for i in 0..n {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let count = r.u64()? as usize;
        let bytes = r.take(count.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let (expected_name, target) = model.params.iter_mut().nth(i).expect("index < len");
        if expected_name != name || target.shape() != shape.as_slice() || count != target.len() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: target.shape().to_vec(),
                found: shape,
            });
        }
        for (dst, chunk) in target.values_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(model)
}

pub fn save_checkpoint(model: &TinyLm, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TinyLm, CheckpointError> {
    from_bytes(&fs::read(path)?)
}

/// SHA-256 of the serialized model, hex encoded.
pub fn checkpoint_hash(model: &TinyLm) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TinyLm {
        TinyLm::new(ModelConfig {
            d_model: 4,
            d_ff: 6,
            n_layers: 1,
            context_len: 8,
            seed: 11,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back.config, m.config);
        for ((_, a), (_, b)) in m.params.iter().zip(back.params.iter()) {
            let ab: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn corrupted_length_header_is_truncation() {
        let m = small();
        let mut bytes = to_bytes(&m);
        // count field of the first tensor: after header (8+4+20+8+4) and
        // name_len(4) + "tok_emb"(7) + ndim(4) + dims(8)
        let off = 44 + 4 + 7 + 4 + 8;
        bytes[off..off + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert_eq!(from_bytes(&bytes).unwrap_err().to_string(), "truncated checkpoint");
        let bytes = to_bytes(&m);
        assert!(matches!(
            from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
    }

    #[test]
    fn distinct_diagnostics() {
        let m = small();
        let mut bytes = to_bytes(&m);
        bytes[8] = 9;
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::VersionMismatch { found: 9, .. })
        ));
        let mut bytes = to_bytes(&m);
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::BadMagic)));
        // first dim of tok_emb
        let mut bytes = to_bytes(&m);
        let off = 44 + 4 + 7 + 4;
        bytes[off..off + 4].copy_from_slice(&39u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }
}
