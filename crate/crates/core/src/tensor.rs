use half::f16;

use crate::error::{Error, Result};
use crate::quant::{self, QuantScheme, BLOCK_LEN};

/// Element storage of a tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    /// Serialized blocks of a block-quantized scheme.
    Quant { scheme: QuantScheme, bytes: Vec<u8> },
}

/// A named row-major tensor, float or block-quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::validation(
                name,
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            name,
            shape,
            data: TensorData::F32(values),
        })
    }

    pub fn scheme(&self) -> QuantScheme {
        match &self.data {
            TensorData::F32(_) => QuantScheme::F32,
            TensorData::F16(_) => QuantScheme::F16,
            TensorData::Quant { scheme, .. } => *scheme,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Innermost dimension.
    pub fn row_len(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn rows(&self) -> usize {
        self.numel() / self.row_len().max(1)
    }

    pub fn payload_bytes(&self) -> usize {
        self.scheme().payload_bytes(self.numel())
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    /// Re-encodes an F32 tensor under `scheme`.
    pub fn convert(&self, scheme: QuantScheme) -> Result<Tensor> {
        let values = self.as_f32().ok_or_else(|| {
            Error::validation(&self.name, format!("source is {}, expected f32", self.scheme()))
        })?;
        let data = match scheme {
            QuantScheme::F32 => TensorData::F32(values.to_vec()),
            QuantScheme::F16 => TensorData::F16(values.iter().map(|&v| f16::from_f32(v)).collect()),
            _ => {
                if !self.row_len().is_multiple_of(BLOCK_LEN) {
                    return Err(Error::validation(
                        &self.name,
                        format!(
                            "innermost dimension {} is not divisible by {BLOCK_LEN}",
                            self.row_len()
                        ),
                    ));
                }
                let bytes = quant::quantize_slice(scheme, values)
                    .map_err(|e| Error::validation(&self.name, e.to_string()))?;
                TensorData::Quant { scheme, bytes }
            }
        };
        Ok(Tensor {
            name: self.name.clone(),
            shape: self.shape.clone(),
            data,
        })
    }

    /// Writes row `r` as f32 into `out` (`out.len() == row_len()`).
    pub fn dequantize_row_into(&self, r: usize, out: &mut [f32]) {
        let n = self.row_len();
        match &self.data {
            TensorData::F32(v) => out.copy_from_slice(&v[r * n..(r + 1) * n]),
            TensorData::F16(v) => {
                for (o, h) in out.iter_mut().zip(&v[r * n..(r + 1) * n]) {
                    *o = h.to_f32();
                }
            }
            TensorData::Quant { scheme, bytes } => {
                let bb = scheme.block_bytes();
                let blocks = n / BLOCK_LEN;
                let row = &bytes[r * blocks * bb..(r + 1) * blocks * bb];
                for (chunk, dst) in row.chunks_exact(bb).zip(out.chunks_exact_mut(BLOCK_LEN)) {
                    quant::dequantize_bytes(*scheme, chunk, dst);
                }
            }
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let n = self.row_len();
        let mut out = vec![0.0; self.numel()];
        for (r, dst) in out.chunks_exact_mut(n.max(1)).enumerate() {
            self.dequantize_row_into(r, dst);
        }
        out
    }

    /// Dot product of row `r` with `x`, accumulated in index order.
    #[inline]
    pub fn row_dot(&self, r: usize, x: &[f32]) -> f32 {
        let n = self.row_len();
        match &self.data {
            TensorData::F32(v) => dot(&v[r * n..(r + 1) * n], x),
            TensorData::F16(v) => {
                let mut acc = 0.0f32;
                for (w, xi) in v[r * n..(r + 1) * n].iter().zip(x) {
                    acc += w.to_f32() * xi;
                }
                acc
            }
            TensorData::Quant { scheme, bytes } => {
                let bb = scheme.block_bytes();
                let blocks = n / BLOCK_LEN;
                let row = &bytes[r * blocks * bb..(r + 1) * blocks * bb];
                let mut buf = [0.0f32; BLOCK_LEN];
                let mut acc = 0.0f32;
                for (chunk, xs) in row.chunks_exact(bb).zip(x.chunks_exact(BLOCK_LEN)) {
                    quant::dequantize_bytes(*scheme, chunk, &mut buf);
                    for (w, xi) in buf.iter().zip(xs) {
                        acc += w * xi;
                    }
                }
                acc
            }
        }
    }

    /// Little-endian payload bytes as stored in a model container.
    pub fn payload(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::F16(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            TensorData::Quant { bytes, .. } => bytes.clone(),
        }
    }

    pub fn from_payload(
        name: String,
        shape: Vec<usize>,
        scheme: QuantScheme,
        bytes: &[u8],
    ) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if scheme.is_quantized() && shape.last().copied().unwrap_or(1) % BLOCK_LEN != 0 {
            return Err(Error::validation(
                name,
                format!("innermost dimension not divisible by {BLOCK_LEN}"),
            ));
        }
        let expect = scheme.payload_bytes(numel);
        if bytes.len() != expect {
            return Err(Error::validation(
                name,
                format!("payload is {} bytes, expected {expect}", bytes.len()),
            ));
        }
        let data = match scheme {
            QuantScheme::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            QuantScheme::F16 => TensorData::F16(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])))
                    .collect(),
            ),
            _ => {
                for chunk in bytes.chunks_exact(scheme.block_bytes()) {
                    quant::QuantBlock::decode(scheme, chunk)
                        .map_err(|e| Error::validation(&name, e.to_string()))?;
                }
                TensorData::Quant {
                    scheme,
                    bytes: bytes.to_vec(),
                }
            }
        };
        Ok(Tensor { name, shape, data })
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_row_dot_matches_dequantized() {
        let values: Vec<f32> = (0..128).map(|i| ((i * 37) % 17) as f32 * 0.1 - 0.8).collect();
        let t = Tensor::f32("w", vec![2, 64], values).unwrap();
        let q = t.convert(QuantScheme::Q5_1).unwrap();
        assert_eq!(q.payload_bytes(), 4 * 24);
        let deq = q.dequantize();
        let x: Vec<f32> = (0..64).map(|i| i as f32 / 64.0).collect();
        for r in 0..2 {
            let expect = dot(&deq[r * 64..(r + 1) * 64], &x);
            assert_eq!(q.row_dot(r, &x), expect);
        }
    }

    #[test]
    fn indivisible_rows_name_the_tensor() {
        let t = Tensor::f32("layers.0.w2", vec![2, 48], vec![0.0; 96]).unwrap();
        match t.convert(QuantScheme::Q4_0) {
            Err(Error::Validation { tensor, .. }) => assert_eq!(tensor, "layers.0.w2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn payload_roundtrip() {
        let t = Tensor::f32("w", vec![1, 32], (0..32).map(|i| i as f32).collect()).unwrap();
        for scheme in [QuantScheme::F32, QuantScheme::F16, QuantScheme::Q8_0] {
            let c = t.convert(scheme).unwrap();
            let back = Tensor::from_payload("w".into(), vec![1, 32], scheme, &c.payload()).unwrap();
            assert_eq!(back, c);
        }
    }
}
