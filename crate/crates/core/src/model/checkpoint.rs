//! Binary checkpoint format.
//!
//! ```text
//! bytes 0..8   magic "DLLM0001"
//! 7 x u64 LE   vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, seed
//! u64 LE       tensor count
//! per tensor, in canonical parameter order:
//!   u64 LE     rank
//!   rank x u64 dimensions
//!   f64 LE     data, row-major
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_shapes, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLLM0001";

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + params.num_params() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [
        c.vocab_size as u64,
        c.d_model as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.max_seq_len as u64,
        c.seed,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("value overflows usize".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let config = ModelConfig {
        vocab_size: r.usize()?,
        d_model: r.usize()?,
        n_layers: r.usize()?,
        n_heads: r.usize()?,
        d_ff: r.usize()?,
        max_seq_len: r.usize()?,
        seed: r.u64()?,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid config: {e}")))?;
    let expected = param_shapes(&config);
    let count = r.usize()?;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} tensors stored, config implies {}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (i, shape) in expected.iter().enumerate() {
        let rank = r.usize()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor {i} has rank {rank}")));
        }
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {i} has shape {dims:?}, expected {shape:?}"
            )));
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    ModelParams::from_tensors(config, tensors).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode(&fs::read(path)?)
}

/// SHA-256 of the encoded checkpoint, hex encoded.
pub fn checkpoint_hash(params: &ModelParams) -> String {
    hex::encode(Sha256::digest(encode(params)))
}
