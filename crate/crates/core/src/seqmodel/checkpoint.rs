//! Binary checkpoint files.
//!
//! Model layout (all integers u32 little-endian):
//!
//! ```text
//! "RIMEFORGE1"
//! vocab_size d_model n_heads n_layers d_ff max_seq
//! n_symbols, then per symbol: byte length + UTF-8 bytes
//! n_matrices, then per matrix in declared order: rows cols + rows*cols f32 LE
//! SHA-256 of every preceding byte (32 bytes)
//! ```
//!
//! Optimizer state uses the magic `"RIMEOPT1"`, a u64 step counter, the
//! first- and second-moment matrices in the same matrix encoding, and the
//! same trailing digest.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::params::{ModelConfig, ModelParams};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::tensorcore::{Array, OptimizerState, Scalar};

pub const MODEL_MAGIC: &[u8] = b"RIMEFORGE1";
pub const OPTIMIZER_MAGIC: &[u8] = b"RIMEOPT1";
const DIGEST_LEN: usize = 32;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_matrices<T: Scalar>(out: &mut Vec<u8>, ms: &[Array<T>]) -> Result<()> {
    put_u32(out, ms.len())?;
    for m in ms {
        put_u32(out, m.rows())?;
        put_u32(out, m.cols())?;
        for &v in m.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(())
}

fn seal(mut body: Vec<u8>) -> Vec<u8> {
    let digest = Sha256::digest(&body);
    body.extend_from_slice(&digest);
    body
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    /// Verifies magic and digest, returning a reader over the body.
    fn open(bytes: &'a [u8], magic: &[u8]) -> Result<Self> {
        if bytes.len() < magic.len() + DIGEST_LEN || &bytes[..magic.len()] != magic {
            return Err(Error::Format("bad magic".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("checksum mismatch".into()));
        }
        Ok(Self { buf: body, at: magic.len() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn matrices<T: Scalar>(&mut self) -> Result<Vec<Array<T>>> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let (r, c) = (self.u32()?, self.u32()?);
            let len = r.checked_mul(c).ok_or_else(|| Error::Format("matrix too large".into()))?;
            let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::Format("matrix too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| T::of(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect();
            out.push(Array::new(r, c, data)?);
        }
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.at)));
        }
        Ok(())
    }
}

/// Serializes a model; values are stored at 32-bit precision.
pub fn model_to_bytes<T: Scalar>(model: &ModelParams<T>) -> Result<Vec<u8>> {
    let mut out = MODEL_MAGIC.to_vec();
    let c = &model.config;
    for v in [c.vocab_size, c.d_model, c.n_heads, c.n_layers, c.d_ff, c.max_seq] {
        put_u32(&mut out, v)?;
    }
    put_u32(&mut out, model.vocab.len())?;
    for s in model.vocab.symbols() {
        put_u32(&mut out, s.len())?;
        out.extend_from_slice(s.as_bytes());
    }
    put_matrices(&mut out, model.store.values())?;
    Ok(seal(out))
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    let mut r = Reader::open(bytes, MODEL_MAGIC)?;
    let config = ModelConfig {
        vocab_size: r.u32()?,
        d_model: r.u32()?,
        n_heads: r.u32()?,
        n_layers: r.u32()?,
        d_ff: r.u32()?,
        max_seq: r.u32()?,
    };
    let n = r.u32()?;
    let mut symbols = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = r.u32()?;
        let s = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(e.to_string()))?;
        symbols.push(s.to_string());
    }
    let vocab = Vocab::try_from(symbols)?;
    if vocab.len() != config.vocab_size {
        return Err(Error::CheckpointMismatch("vocabulary size disagrees with config".into()));
    }
    let matrices = r.matrices()?;
    r.finish()?;
    ModelParams::from_parts(config, vocab, matrices)
}

pub fn save_model<T: Scalar>(model: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    model_from_bytes(&fs::read(path)?)
}

pub fn optimizer_to_bytes<T: Scalar>(state: &OptimizerState<T>) -> Result<Vec<u8>> {
    let mut out = OPTIMIZER_MAGIC.to_vec();
    out.extend_from_slice(&state.step.to_le_bytes());
    put_matrices(&mut out, &state.first)?;
    put_matrices(&mut out, &state.second)?;
    Ok(seal(out))
}

pub fn optimizer_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<OptimizerState<T>> {
    let mut r = Reader::open(bytes, OPTIMIZER_MAGIC)?;
    let step = r.u64()?;
    let first = r.matrices()?;
    let second = r.matrices()?;
    r.finish()?;
    Ok(OptimizerState { step, first, second })
}

pub fn save_optimizer<T: Scalar>(state: &OptimizerState<T>, path: &Path) -> Result<()> {
    fs::write(path, optimizer_to_bytes(state)?)?;
    Ok(())
}

pub fn load_optimizer<T: Scalar>(path: &Path) -> Result<OptimizerState<T>> {
    optimizer_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ModelParams<f32> {
        let vocab = Vocab::new(vec!["x".into(), "y".into()]).unwrap();
        let cfg = ModelConfig {
            vocab_size: 10,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 12,
            max_seq: 16,
        };
        ModelParams::init(&cfg, &vocab, 4).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = model_to_bytes(&m).unwrap();
        let back: ModelParams<f32> = model_from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = model_to_bytes(&model()).unwrap();
        bytes[40] ^= 1;
        assert!(matches!(model_from_bytes::<f32>(&bytes), Err(Error::Format(_))));
        assert!(matches!(model_from_bytes::<f32>(b"RIMEFORGE0"), Err(Error::Format(_))));
    }

    #[test]
    fn optimizer_round_trip() {
        let m = model();
        let state = OptimizerState {
            step: 17,
            first: m.store.values().to_vec(),
            second: m.store.zeros_like(),
        };
        let bytes = optimizer_to_bytes(&state).unwrap();
        let back: OptimizerState<f32> = optimizer_from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.first, state.first);
        assert_eq!(back.second, state.second);
    }
}
