//! GGML-style block quantization.
//!
//! Every quantized scheme encodes weights in blocks of [`BLOCK_LEN`] values.
//! A block carries a half-precision scale (`delta`), an optional
//! half-precision offset (`min`, `_1` variants only) and the packed codes.
//!
//! Wire layout of one block, little-endian:
//!
//! ```text
//! [delta: 2][min: 2, _1 only][high-bit plane: 4, Q5 only][codes: 16 (4/5-bit) | 32 (8-bit)]
//! ```
//!
//! Nibble packing puts element `i` in the low nibble of byte `i` for `i < 16`
//! and in the high nibble of byte `i - 16` otherwise. Bit `i` of the Q5
//! high-bit plane is the fifth bit of element `i`.

use std::fmt;
use std::str::FromStr;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of weights in every quantized block.
pub const BLOCK_LEN: usize = 32;

/// Storage scheme of a tensor.
///
/// Declaration order is the reporting order (quantized schemes by width, then
/// the float formats).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantScheme {
    Q4_0,
    Q4_1,
    Q5_0,
    Q5_1,
    Q8_0,
    F16,
    F32,
}

impl QuantScheme {
    pub const QUANTIZED: [QuantScheme; 5] = [
        QuantScheme::Q4_0,
        QuantScheme::Q4_1,
        QuantScheme::Q5_0,
        QuantScheme::Q5_1,
        QuantScheme::Q8_0,
    ];

    pub fn is_quantized(self) -> bool {
        !matches!(self, QuantScheme::F32 | QuantScheme::F16)
    }

    pub fn is_asymmetric(self) -> bool {
        matches!(self, QuantScheme::Q4_1 | QuantScheme::Q5_1)
    }

    /// Width of one stored code in bits (element width for float formats).
    pub fn code_bits(self) -> u32 {
        match self {
            QuantScheme::Q4_0 | QuantScheme::Q4_1 => 4,
            QuantScheme::Q5_0 | QuantScheme::Q5_1 => 5,
            QuantScheme::Q8_0 => 8,
            QuantScheme::F16 => 16,
            QuantScheme::F32 => 32,
        }
    }

    fn max_code(self) -> i32 {
        (1 << self.code_bits()) - 1
    }

    /// Midpoint bias of symmetric schemes: stored code = quantum + bias.
    fn bias(self) -> i32 {
        match self {
            QuantScheme::Q4_0 => 8,
            QuantScheme::Q5_0 => 16,
            QuantScheme::Q8_0 => 128,
            _ => 0,
        }
    }

    /// Divisor applied to the block's absolute maximum in symmetric schemes.
    fn half_range(self) -> f32 {
        match self {
            QuantScheme::Q4_0 => 8.0,
            QuantScheme::Q5_0 => 16.0,
            QuantScheme::Q8_0 => 127.0,
            _ => 0.0,
        }
    }

    /// Serialized size of one block, or of one element for F32/F16.
    pub fn block_bytes(self) -> usize {
        match self {
            QuantScheme::Q4_0 => 18,
            QuantScheme::Q4_1 => 20,
            QuantScheme::Q5_0 => 22,
            QuantScheme::Q5_1 => 24,
            QuantScheme::Q8_0 => 34,
            QuantScheme::F16 => 2,
            QuantScheme::F32 => 4,
        }
    }

    /// Elements covered by one `block_bytes` unit.
    pub fn block_len(self) -> usize {
        if self.is_quantized() {
            BLOCK_LEN
        } else {
            1
        }
    }

    /// Storage bits per weight including scale and offset overhead.
    pub fn effective_bits_per_weight(self) -> f64 {
        (self.block_bytes() * 8) as f64 / self.block_len() as f64
    }

    /// Payload size of `elements` weights. `elements` must be a multiple of
    /// the block length for quantized schemes.
    pub fn payload_bytes(self, elements: usize) -> usize {
        elements / self.block_len() * self.block_bytes()
    }

    /// On-disk type tag (the GGML type ids).
    pub fn tag(self) -> u8 {
        match self {
            QuantScheme::F32 => 0,
            QuantScheme::F16 => 1,
            QuantScheme::Q4_0 => 2,
            QuantScheme::Q4_1 => 3,
            QuantScheme::Q5_0 => 6,
            QuantScheme::Q5_1 => 7,
            QuantScheme::Q8_0 => 8,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => QuantScheme::F32,
            1 => QuantScheme::F16,
            2 => QuantScheme::Q4_0,
            3 => QuantScheme::Q4_1,
            6 => QuantScheme::Q5_0,
            7 => QuantScheme::Q5_1,
            8 => QuantScheme::Q8_0,
            other => return Err(Error::Format(format!("unknown scheme tag {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantScheme::Q4_0 => "q4_0",
            QuantScheme::Q4_1 => "q4_1",
            QuantScheme::Q5_0 => "q5_0",
            QuantScheme::Q5_1 => "q5_1",
            QuantScheme::Q8_0 => "q8_0",
            QuantScheme::F16 => "f16",
            QuantScheme::F32 => "f32",
        }
    }
}

impl fmt::Display for QuantScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        [
            QuantScheme::Q4_0,
            QuantScheme::Q4_1,
            QuantScheme::Q5_0,
            QuantScheme::Q5_1,
            QuantScheme::Q8_0,
            QuantScheme::F16,
            QuantScheme::F32,
        ]
        .into_iter()
        .find(|scheme| scheme.name() == lower)
        .ok_or_else(|| Error::Config(format!("unknown quantization scheme `{s}`")))
    }
}

/// One decoded block: scale, offset and 32 unpacked codes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantBlock {
    pub scheme: QuantScheme,
    pub delta: f16,
    /// Offset; zero for symmetric schemes.
    pub min: f16,
    pub codes: [u8; BLOCK_LEN],
}

/// Smallest half-precision value that is `>= x`.
fn f16_ceil(x: f32) -> f16 {
    let h = f16::from_f32(x);
    if h.to_f32() >= x || h.is_nan() {
        h
    } else {
        f16_step_up(h)
    }
}

/// Largest half-precision value that is `<= x`.
fn f16_floor(x: f32) -> f16 {
    let h = f16::from_f32(x);
    if h.to_f32() <= x || h.is_nan() {
        h
    } else {
        f16_step_down(h)
    }
}

fn f16_step_up(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x0001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits + 1)
    } else {
        f16::from_bits(bits - 1)
    }
}

fn f16_step_down(h: f16) -> f16 {
    let bits = h.to_bits();
    if bits & 0x7fff == 0 {
        f16::from_bits(0x8001)
    } else if bits & 0x8000 == 0 {
        f16::from_bits(bits - 1)
    } else {
        f16::from_bits(bits + 1)
    }
}

fn require_quantized(scheme: QuantScheme) -> Result<()> {
    if scheme.is_quantized() {
        Ok(())
    } else {
        Err(Error::Codec(format!("{scheme} is not a block-quantized scheme")))
    }
}

/// Quantizes exactly 32 finite values.
///
/// Scales are rounded up and offsets rounded down to half precision so that
/// every value lands inside the representable code range; codes are then
/// derived from the stored (rounded) scale with round-half-away-from-zero.
pub fn quantize_block(scheme: QuantScheme, values: &[f32]) -> Result<QuantBlock> {
    require_quantized(scheme)?;
    if values.len() != BLOCK_LEN {
        return Err(Error::Codec(format!(
            "block needs {BLOCK_LEN} values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Codec(format!("non-finite value at index {i}")));
    }

    let max_code = scheme.max_code();
    let mut codes = [0u8; BLOCK_LEN];

    if scheme.is_asymmetric() {
        let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if lo == hi {
            let min = f16::from_f32(lo);
            if !min.is_finite() {
                return Err(Error::Codec("block offset overflows half precision".into()));
            }
            return Ok(QuantBlock {
                scheme,
                delta: f16::ZERO,
                min,
                codes,
            });
        }
        let min = f16_floor(lo);
        let delta = f16_ceil((hi - min.to_f32()) / max_code as f32);
        if !min.is_finite() || !delta.is_finite() {
            return Err(Error::Codec("block scale overflows half precision".into()));
        }
        let (d, m) = (delta.to_f32(), min.to_f32());
        for (code, &v) in codes.iter_mut().zip(values) {
            let q = ((v - m) / d).round() as i32;
            *code = q.clamp(0, max_code) as u8;
        }
        Ok(QuantBlock {
            scheme,
            delta,
            min,
            codes,
        })
    } else {
        let bias = scheme.bias();
        let amax = values.iter().fold(0.0f32, |acc, v| acc.max(v.abs()));
        if amax == 0.0 {
            codes.fill(bias as u8);
            return Ok(QuantBlock {
                scheme,
                delta: f16::ZERO,
                min: f16::ZERO,
                codes,
            });
        }
        let delta = f16_ceil(amax / scheme.half_range());
        if !delta.is_finite() {
            return Err(Error::Codec("block scale overflows half precision".into()));
        }
        let d = delta.to_f32();
        for (code, &v) in codes.iter_mut().zip(values) {
            let q = (v / d).round() as i32 + bias;
            *code = q.clamp(0, max_code) as u8;
        }
        Ok(QuantBlock {
            scheme,
            delta,
            min: f16::ZERO,
            codes,
        })
    }
}

/// Reconstructs the 32 values of a block.
pub fn dequantize_block(block: &QuantBlock) -> [f32; BLOCK_LEN] {
    let mut out = [0.0f32; BLOCK_LEN];
    let d = block.delta.to_f32();
    if block.scheme.is_asymmetric() {
        let m = block.min.to_f32();
        for (o, &c) in out.iter_mut().zip(&block.codes) {
            *o = d * c as f32 + m;
        }
    } else {
        let bias = block.scheme.bias();
        for (o, &c) in out.iter_mut().zip(&block.codes) {
            *o = d * (c as i32 - bias) as f32;
        }
    }
    out
}

impl QuantBlock {
    /// Appends the wire encoding of this block to `out`.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.delta.to_bits().to_le_bytes());
        if self.scheme.is_asymmetric() {
            out.extend_from_slice(&self.min.to_bits().to_le_bytes());
        }
        match self.scheme.code_bits() {
            8 => out.extend_from_slice(&self.codes),
            bits => {
                if bits == 5 {
                    let plane = self
                        .codes
                        .iter()
                        .enumerate()
                        .fold(0u32, |acc, (i, &c)| acc | (((c as u32 >> 4) & 1) << i));
                    out.extend_from_slice(&plane.to_le_bytes());
                }
                for i in 0..BLOCK_LEN / 2 {
                    out.push((self.codes[i] & 0x0f) | ((self.codes[i + 16] & 0x0f) << 4));
                }
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.scheme.block_bytes());
        self.encode_into(&mut out);
        out
    }

    /// Parses one block from exactly `scheme.block_bytes()` bytes.
    pub fn decode(scheme: QuantScheme, bytes: &[u8]) -> Result<Self> {
        require_quantized(scheme)?;
        if bytes.len() != scheme.block_bytes() {
            return Err(Error::Codec(format!(
                "{scheme} block must be {} bytes, got {}",
                scheme.block_bytes(),
                bytes.len()
            )));
        }
        let block = decode_unchecked(scheme, bytes);
        if !block.delta.is_finite() || !block.min.is_finite() {
            return Err(Error::Codec("non-finite block scale or offset".into()));
        }
        Ok(block)
    }
}

fn read_f16(bytes: &[u8], at: usize) -> f16 {
    f16::from_bits(u16::from_le_bytes([bytes[at], bytes[at + 1]]))
}

fn decode_unchecked(scheme: QuantScheme, bytes: &[u8]) -> QuantBlock {
    let delta = read_f16(bytes, 0);
    let mut at = 2;
    let min = if scheme.is_asymmetric() {
        at += 2;
        read_f16(bytes, 2)
    } else {
        f16::ZERO
    };
    let mut codes = [0u8; BLOCK_LEN];
    match scheme.code_bits() {
        8 => codes.copy_from_slice(&bytes[at..at + BLOCK_LEN]),
        bits => {
            let plane = if bits == 5 {
                let p = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
                at += 4;
                p
            } else {
                0
            };
            for i in 0..BLOCK_LEN / 2 {
                let byte = bytes[at + i];
                codes[i] = byte & 0x0f;
                codes[i + 16] = byte >> 4;
            }
            if bits == 5 {
                for (i, c) in codes.iter_mut().enumerate() {
                    *c |= (((plane >> i) & 1) as u8) << 4;
                }
            }
        }
    }
    QuantBlock {
        scheme,
        delta,
        min,
        codes,
    }
}

/// Dequantizes one serialized block straight into `out` (32 values).
///
/// Hot-path helper for kernels; `bytes` must hold exactly one block.
#[inline]
pub fn dequantize_bytes(scheme: QuantScheme, bytes: &[u8], out: &mut [f32]) {
    debug_assert_eq!(bytes.len(), scheme.block_bytes());
    let block = decode_unchecked(scheme, bytes);
    out[..BLOCK_LEN].copy_from_slice(&dequantize_block(&block));
}

/// Quantizes a row-major slice whose length is a multiple of 32.
pub fn quantize_slice(scheme: QuantScheme, values: &[f32]) -> Result<Vec<u8>> {
    require_quantized(scheme)?;
    if !values.len().is_multiple_of(BLOCK_LEN) {
        return Err(Error::Codec(format!(
            "{} values is not a multiple of {BLOCK_LEN}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(scheme.payload_bytes(values.len()));
    for chunk in values.chunks_exact(BLOCK_LEN) {
        quantize_block(scheme, chunk)?.encode_into(&mut out);
    }
    Ok(out)
}
