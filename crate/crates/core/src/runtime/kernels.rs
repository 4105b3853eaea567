//! CPU compute kernels with flop accounting.
//!
//! Every output element is produced by one sequential reduction in index
//! order, whichever backend runs it. The threaded backend only distributes
//! whole output elements (or whole output rows) across workers, so results
//! are bit-identical to the naive backend for any thread count.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Kernel set selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Naive,
    Threaded,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Naive => "naive",
            BackendKind::Threaded => "threaded",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(BackendKind::Naive),
            "threaded" => Ok(BackendKind::Threaded),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

#[derive(Clone)]
enum Pool {
    Naive,
    Threaded(Arc<rayon::ThreadPool>),
}

/// Kernel backend plus the running flop counter of one session.
#[derive(Clone)]
pub struct ExecCtx {
    pool: Pool,
    threads: usize,
    flops: u64,
}

impl fmt::Debug for ExecCtx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExecCtx")
            .field("backend", &self.kind())
            .field("threads", &self.threads)
            .field("flops", &self.flops)
            .finish()
    }
}

impl ExecCtx {
    pub fn naive() -> Self {
        ExecCtx {
            pool: Pool::Naive,
            threads: 1,
            flops: 0,
        }
    }

    /// Threaded kernels on a dedicated pool. Falls back to the naive kernels
    /// when the pool cannot be built.
    pub fn threaded(threads: usize) -> Self {
        let threads = threads.max(1);
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => ExecCtx {
                pool: Pool::Threaded(Arc::new(pool)),
                threads,
                flops: 0,
            },
            Err(_) => Self::naive(),
        }
    }

    pub fn new(kind: BackendKind, threads: usize) -> Self {
        match kind {
            BackendKind::Naive => Self::naive(),
            BackendKind::Threaded => Self::threaded(threads),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self.pool {
            Pool::Naive => BackendKind::Naive,
            Pool::Threaded(_) => BackendKind::Threaded,
        }
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops = 0;
    }

    pub fn add_flops(&mut self, n: u64) {
        self.flops += n;
    }

    /// Fills `out` in chunks of `chunk` elements; `f(chunk_index, chunk)`.
    pub fn fill<F>(&self, out: &mut [f32], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f32]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        match &self.pool {
            Pool::Naive => out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            Pool::Threaded(pool) => pool.install(|| {
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c))
            }),
        }
    }

    /// `x · Wᵀ` for `x: m × k` and a weight `W` stored as `n` rows of `k`.
    pub fn linear(&mut self, x: &Matrix, w: &Tensor) -> Result<Matrix> {
        if w.shape.len() != 2 || w.row_len() != x.cols {
            return Err(Error::Shape(format!(
                "linear: input {}x{} against weight `{}` {:?}",
                x.rows, x.cols, w.name, w.shape
            )));
        }
        let (m, k, n) = (x.rows, x.cols, w.rows());
        let mut out = vec![0.0f32; m * n];
        let chunk = self.chunk_len(m * n);
        self.fill(&mut out, chunk, |ci, dst| {
            let start = ci * chunk;
            for (o, idx) in dst.iter_mut().zip(start..) {
                let (i, j) = (idx / n, idx % n);
                *o = w.row_dot(j, &x.data[i * k..(i + 1) * k]);
            }
        });
        self.flops += 2 * (m * k * n) as u64;
        Ok(Matrix::new(m, n, out))
    }

    /// `A · B` for `A: m × k` and `B: k × n` (rows of `B` are dequantized on
    /// the fly when `B` is block-quantized).
    pub fn matmul(&mut self, a: &Matrix, b: &Tensor) -> Result<Matrix> {
        if b.shape.len() != 2 || b.rows() != a.cols {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times `{}` {:?}",
                a.rows, a.cols, b.name, b.shape
            )));
        }
        let (m, k, n) = (a.rows, a.cols, b.row_len());
        let mut out = vec![0.0f32; m * n];
        let dense = b.as_f32();
        self.fill(&mut out, n, |i, row| {
            let mut scratch = vec![0.0f32; if dense.is_some() { 0 } else { n }];
            for p in 0..k {
                let aip = a.data[i * k + p];
                let bp = match dense {
                    Some(v) => &v[p * n..(p + 1) * n],
                    None => {
                        b.dequantize_row_into(p, &mut scratch);
                        &scratch[..]
                    }
                };
                for (o, bv) in row.iter_mut().zip(bp) {
                    *o += aip * bv;
                }
            }
        });
        self.flops += 2 * (m * k * n) as u64;
        Ok(Matrix::new(m, n, out))
    }

    fn chunk_len(&self, total: usize) -> usize {
        match self.pool {
            Pool::Naive => total.max(1),
            Pool::Threaded(_) => total.div_ceil(self.threads * 4).max(16),
        }
    }
}

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn into_tensor(self, name: &str) -> Tensor {
        Tensor::f32(name, vec![self.rows, self.cols], self.data).expect("shape matches data")
    }
}

/// In-place softmax of `row * scale`, max-subtracted.
pub fn softmax_in_place(row: &mut [f32], scale: f32) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v * scale - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &Matrix, scale: f32) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i), scale);
    }
    out
}

pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let ms = dot(x, x) / x.len() as f32;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

/// Rotary embedding over consecutive pairs of each `head_dim` chunk of `v`.
pub fn rope_apply(v: &mut [f32], head_dim: usize, position: usize, base: f32) {
    for head in v.chunks_exact_mut(head_dim) {
        for (i, pair) in head.chunks_exact_mut(2).enumerate() {
            let freq = base.powf(-((2 * i) as f32) / head_dim as f32);
            let angle = position as f32 * freq;
            let (sin, cos) = angle.sin_cos();
            let (a, b) = (pair[0], pair[1]);
            pair[0] = a * cos - b * sin;
            pair[1] = a * sin + b * cos;
        }
    }
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
