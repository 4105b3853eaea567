use std::borrow::Cow;

use half::f16;

use crate::error::{Error, Result};
use crate::metrics::kv_cache_size;
use crate::model::ModelSpec;

#[derive(Debug, Clone)]
enum KvBuffer {
    F32(Vec<f32>),
    F16(Vec<f16>),
}

impl KvBuffer {
    fn zeros(databyte: usize, len: usize) -> Self {
        match databyte {
            2 => KvBuffer::F16(vec![f16::ZERO; len]),
            _ => KvBuffer::F32(vec![0.0; len]),
        }
    }

    fn bytes(&self) -> u64 {
        match self {
            KvBuffer::F32(v) => v.len() as u64 * 4,
            KvBuffer::F16(v) => v.len() as u64 * 2,
        }
    }

    fn write(&mut self, at: usize, src: &[f32]) {
        match self {
            KvBuffer::F32(v) => v[at..at + src.len()].copy_from_slice(src),
            KvBuffer::F16(v) => {
                for (d, s) in v[at..at + src.len()].iter_mut().zip(src) {
                    *d = f16::from_f32(*s);
                }
            }
        }
    }

    fn prefix(&self, len: usize) -> Cow<'_, [f32]> {
        match self {
            KvBuffer::F32(v) => Cow::Borrowed(&v[..len]),
            KvBuffer::F16(v) => Cow::Owned(v[..len].iter().map(|h| h.to_f32()).collect()),
        }
    }
}

/// Pre-allocated per-layer key/value storage.
///
/// Layout per layer: `batch × capacity × n_kv_heads × head_dim`. Only batch
/// slot 0 is written by the single-stream runtime; the remaining slots exist
/// so the allocation matches the analytic cache size.
#[derive(Debug, Clone)]
pub struct KvCache {
    batch: usize,
    capacity: usize,
    databyte: usize,
    kv_dim: usize,
    keys: Vec<KvBuffer>,
    values: Vec<KvBuffer>,
    position: usize,
}

/// Allocates a zeroed cache holding `capacity` tokens per batch slot.
/// `databyte` selects f32 (4) or f16 (2) element storage.
pub fn allocate_kv_cache(
    spec: &ModelSpec,
    batch: usize,
    capacity: usize,
    databyte: usize,
) -> Result<KvCache> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::Capacity("batch size must be at least 1".into()));
    }
    if capacity > spec.max_seq {
        return Err(Error::Capacity(format!(
            "cache capacity {capacity} exceeds max_seq {}",
            spec.max_seq
        )));
    }
    if databyte != 2 && databyte != 4 {
        return Err(Error::Capacity(format!(
            "unsupported KV element size {databyte} (expected 2 or 4)"
        )));
    }
    let per_layer = batch * capacity * spec.kv_dim();
    Ok(KvCache {
        batch,
        capacity,
        databyte,
        kv_dim: spec.kv_dim(),
        keys: (0..spec.n_layers).map(|_| KvBuffer::zeros(databyte, per_layer)).collect(),
        values: (0..spec.n_layers).map(|_| KvBuffer::zeros(databyte, per_layer)).collect(),
        position: 0,
    })
}

impl KvCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn databyte(&self) -> usize {
        self.databyte
    }

    /// Tokens currently cached.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.position
    }

    /// Bytes actually held by the key and value buffers.
    pub fn allocated_bytes(&self) -> u64 {
        self.keys.iter().chain(&self.values).map(KvBuffer::bytes).sum()
    }

    /// Analytic size of the filled prefix.
    pub fn filled_bytes(&self, spec: &ModelSpec) -> u64 {
        kv_cache_size(spec, self.batch, self.position, self.databyte).unwrap_or(0)
    }

    /// Stores the key/value rows of `len` consecutive tokens starting at the
    /// current position. Does not advance the position.
    pub(crate) fn write(&mut self, layer: usize, k_rows: &[f32], v_rows: &[f32]) {
        let at = self.position * self.kv_dim;
        self.keys[layer].write(at, k_rows);
        self.values[layer].write(at, v_rows);
    }

    pub(crate) fn keys(&self, layer: usize, tokens: usize) -> Cow<'_, [f32]> {
        self.keys[layer].prefix(tokens * self.kv_dim)
    }

    pub(crate) fn values(&self, layer: usize, tokens: usize) -> Cow<'_, [f32]> {
        self.values[layer].prefix(tokens * self.kv_dim)
    }

    pub(crate) fn advance(&mut self, n: usize) {
        debug_assert!(self.position + n <= self.capacity);
        self.position += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ModelSpec {
        ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 2,
            n_layers: 3,
            d_ff: 32,
            vocab_size: 16,
            max_seq: 64,
            rope_base: 10_000.0,
        }
    }

    #[test]
    fn allocation_matches_analytic_size() {
        let kv = allocate_kv_cache(&small_spec(), 2, 16, 4).unwrap();
        assert_eq!(kv.allocated_bytes(), 6144);
        assert_eq!(kv.position(), 0);
        let half = allocate_kv_cache(&small_spec(), 2, 16, 2).unwrap();
        assert_eq!(half.allocated_bytes(), 3072);
    }

    #[test]
    fn degenerate_and_invalid() {
        let kv = allocate_kv_cache(&small_spec(), 1, 0, 4).unwrap();
        assert_eq!(kv.allocated_bytes(), 0);
        assert!(matches!(
            allocate_kv_cache(&small_spec(), 1, 65, 4),
            Err(Error::Capacity(_))
        ));
        assert!(allocate_kv_cache(&small_spec(), 0, 4, 4).is_err());
        assert!(allocate_kv_cache(&small_spec(), 1, 4, 3).is_err());
    }
}
