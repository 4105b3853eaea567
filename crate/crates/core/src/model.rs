//! Model hyperparameters and the ELIB model container.
//!
//! Container layout, all integers little-endian:
//!
//! ```text
//! "ELIB" | version u32 | 8 x u32 spec fields | rope_base f32 | scheme u8 | tensor count u32
//! directory: { name_len u16, name, rank u8, dims u32[rank], scheme u8, offset u64, bytes u64 }*
//! payloads, each starting on a 32-byte boundary (offsets are absolute)
//! ```
//!
//! The eight spec words are d_model, n_heads, n_kv_heads, n_layers, d_ff,
//! vocab_size, max_seq and a reserved word that must be zero.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantScheme;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ELIB";
pub const FORMAT_VERSION: u32 = 1;
const PAYLOAD_ALIGN: u64 = 32;

/// Transformer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub rope_base: f32,
}

impl ModelSpec {
    /// Desk-scale reference configuration.
    pub fn tiny() -> Self {
        ModelSpec {
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            n_layers: 4,
            d_ff: 192,
            vocab_size: 259,
            max_seq: 256,
            rope_base: 10_000.0,
        }
    }

    /// LLaMA-7B shape, used for analytic sizing only.
    pub fn llama_7b() -> Self {
        ModelSpec {
            d_model: 4096,
            n_heads: 32,
            n_kv_heads: 32,
            n_layers: 32,
            d_ff: 11008,
            vocab_size: 32000,
            max_seq: 2048,
            rope_base: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Spec(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Spec(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Spec(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(Error::Spec("rope_base must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of one token's keys (or values) across all KV heads.
    pub fn kv_dim(&self) -> usize {
        self.head_dim() * self.n_kv_heads
    }

    /// Expected tensor names and shapes, in container directory order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, kv, ff) = (self.d_model, self.kv_dim(), self.d_ff);
        let mut out = vec![("tok_embeddings.weight".to_string(), vec![self.vocab_size, d])];
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attention_norm.weight"), vec![d]));
            out.push((format!("{p}.attention.wq.weight"), vec![d, d]));
            out.push((format!("{p}.attention.wk.weight"), vec![kv, d]));
            out.push((format!("{p}.attention.wv.weight"), vec![kv, d]));
            out.push((format!("{p}.attention.wo.weight"), vec![d, d]));
            out.push((format!("{p}.ffn_norm.weight"), vec![d]));
            out.push((format!("{p}.feed_forward.w1.weight"), vec![ff, d]));
            out.push((format!("{p}.feed_forward.w2.weight"), vec![d, ff]));
            out.push((format!("{p}.feed_forward.w3.weight"), vec![ff, d]));
        }
        out.push(("norm.weight".to_string(), vec![d]));
        out.push((OUTPUT_TENSOR.to_string(), vec![self.vocab_size, d]));
        out
    }

    /// Parameter bytes of this architecture if every matrix used `scheme`
    /// and norm gains stayed f32.
    pub fn estimate_param_bytes(&self, scheme: QuantScheme) -> u64 {
        self.tensor_layout()
            .iter()
            .map(|(_, shape)| {
                let n: usize = shape.iter().product();
                if shape.len() == 2 {
                    (n as f64 * scheme.effective_bits_per_weight() / 8.0).round() as u64
                } else {
                    n as u64 * 4
                }
            })
            .sum()
    }
}

/// Final vocabulary projection; kept in f32 by whole-model quantization.
pub const OUTPUT_TENSOR: &str = "output.weight";

/// In-memory image of a model container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub spec: ModelSpec,
    pub scheme: QuantScheme,
    pub tensors: Vec<Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated model container").into());
        }
        let out = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl ModelFile {
    /// Sum of serialized tensor payloads.
    pub fn param_bytes(&self) -> u64 {
        self.tensors.iter().map(|t| t.payload_bytes() as u64).sum()
    }

    /// Payload bytes of block-quantized tensors only.
    pub fn quantized_payload_bytes(&self) -> u64 {
        self.tensors
            .iter()
            .filter(|t| t.scheme().is_quantized())
            .map(|t| t.payload_bytes() as u64)
            .sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = Vec::new();
        header.extend_from_slice(MAGIC);
        header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let s = &self.spec;
        for v in [
            s.d_model,
            s.n_heads,
            s.n_kv_heads,
            s.n_layers,
            s.d_ff,
            s.vocab_size,
            s.max_seq,
            0,
        ] {
            header.extend_from_slice(&(v as u32).to_le_bytes());
        }
        header.extend_from_slice(&s.rope_base.to_le_bytes());
        header.push(self.scheme.tag());
        header.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());

        let dir_len: usize = self
            .tensors
            .iter()
            .map(|t| 2 + t.name.len() + 1 + 4 * t.shape.len() + 1 + 8 + 8)
            .sum();
        let mut offset = align_up((header.len() + dir_len) as u64);
        let mut layout = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let bytes = t.payload_bytes() as u64;
            layout.push((offset, bytes));
            offset = align_up(offset + bytes);
        }

        for (t, (off, bytes)) in self.tensors.iter().zip(&layout) {
            let name = t.name.as_bytes();
            if name.len() > u16::MAX as usize || t.shape.len() > u8::MAX as usize {
                return Err(Error::validation(&t.name, "name or rank too long for container"));
            }
            header.extend_from_slice(&(name.len() as u16).to_le_bytes());
            header.extend_from_slice(name);
            header.push(t.shape.len() as u8);
            for &d in &t.shape {
                header.extend_from_slice(&(d as u32).to_le_bytes());
            }
            header.push(t.scheme().tag());
            header.extend_from_slice(&off.to_le_bytes());
            header.extend_from_slice(&bytes.to_le_bytes());
        }

        let mut pos = header.len() as u64;
        w.write_all(&header)?;
        for (t, (off, _)) in self.tensors.iter().zip(&layout) {
            w.write_all(&vec![0u8; (off - pos) as usize])?;
            let payload = t.payload();
            w.write_all(&payload)?;
            pos = off + payload.len() as u64;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_to(io::BufWriter::new(file))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"ELIB\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut words = [0usize; 8];
        for w in &mut words {
            *w = r.u32()? as usize;
        }
        if words[7] != 0 {
            return Err(Error::Format("reserved spec word is not zero".into()));
        }
        let spec = ModelSpec {
            d_model: words[0],
            n_heads: words[1],
            n_kv_heads: words[2],
            n_layers: words[3],
            d_ff: words[4],
            vocab_size: words[5],
            max_seq: words[6],
            rope_base: r.f32()?,
        };
        spec.validate()?;
        let scheme = QuantScheme::from_tag(r.u8()?)?;
        let count = r.u32()? as usize;

        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let tscheme = QuantScheme::from_tag(r.u8()?)?;
            let offset = r.u64()?;
            let bytes = r.u64()?;
            entries.push((name, shape, tscheme, offset, bytes));
        }

        let mut tensors = Vec::with_capacity(entries.len());
        for (name, shape, tscheme, offset, bytes) in entries {
            if offset % PAYLOAD_ALIGN != 0 {
                return Err(Error::Format(format!("payload of `{name}` is not 32-byte aligned")));
            }
            let end = offset.checked_add(bytes).filter(|&e| e <= buf.len() as u64);
            let Some(end) = end else {
                return Err(io::Error::new(
                    io::ErrorKind::UnexpectedEof,
                    format!("payload of `{name}` runs past end of file"),
                )
                .into());
            };
            let payload = &buf[offset as usize..end as usize];
            tensors.push(Tensor::from_payload(name, shape, tscheme, payload)?);
        }
        Ok(ModelFile {
            spec,
            scheme,
            tensors,
        })
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Checks that every tensor the architecture needs is present with the
    /// expected shape.
    pub fn validate_layout(&self) -> Result<()> {
        for (name, shape) in self.spec.tensor_layout() {
            let t = self
                .tensor(&name)
                .ok_or_else(|| Error::validation(&name, "missing from container"))?;
            if t.shape != shape {
                return Err(Error::validation(
                    &name,
                    format!("shape {:?} conflicts with spec, expected {shape:?}", t.shape),
                ));
            }
        }
        Ok(())
    }
}

fn align_up(x: u64) -> u64 {
    x.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

/// Re-encodes every 2-D weight of an f32 model under `scheme`.
///
/// Norm gains (1-D) and the output projection stay f32. Tensors are converted
/// in parallel; directory order is preserved.
pub fn quantize_model(source: &ModelFile, scheme: QuantScheme) -> Result<ModelFile> {
    let tensors = source
        .tensors
        .par_iter()
        .map(|t| {
            if t.as_f32().is_none() {
                return Err(Error::validation(
                    &t.name,
                    format!("source tensor is {}, expected f32", t.scheme()),
                ));
            }
            if t.shape.len() == 2 && t.name != OUTPUT_TENSOR {
                t.convert(scheme)
            } else {
                Ok(t.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelFile {
        spec: source.spec,
        scheme,
        tensors,
    })
}

/// Deterministic random f32 model for `spec` and `seed`.
///
/// Matrices are drawn from N(0, 1/fan_in), embeddings from N(0, 1) and norm
/// gains are one.
pub fn generate_model(spec: ModelSpec, seed: u64) -> Result<ModelFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = Vec::new();
    for (name, shape) in spec.tensor_layout() {
        let n: usize = shape.iter().product();
        let values = if shape.len() == 1 {
            vec![1.0; n]
        } else {
            let std = if name == "tok_embeddings.weight" {
                1.0
            } else {
                1.0 / (shape[1] as f32).sqrt()
            };
            let normal = Normal::new(0.0f32, std).expect("positive std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.push(Tensor::f32(name, shape, values)?);
    }
    Ok(ModelFile {
        spec,
        scheme: QuantScheme::F32,
        tensors,
    })
}
