//! LLaMA-style decoder graph: RMSNorm pre-norm, rotary embeddings, SwiGLU
//! feed-forward, no biases.

use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{ModelFile, ModelSpec, OUTPUT_TENSOR};
use crate::quant::QuantScheme;
use crate::runtime::kernels::{rmsnorm, rope_apply, silu, softmax_in_place, ExecCtx, Matrix};
use crate::runtime::kv::KvCache;
use crate::tensor::{dot, Tensor};

pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct Layer {
    pub attention_norm: Vec<f32>,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ffn_norm: Vec<f32>,
    pub w1: Tensor,
    pub w2: Tensor,
    pub w3: Tensor,
}

/// Immutable model weights, shareable across threads.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub scheme: QuantScheme,
    pub tok_embeddings: Tensor,
    pub layers: Vec<Layer>,
    pub norm: Vec<f32>,
    pub output: Tensor,
    pub param_bytes: u64,
}

impl Model {
    pub fn from_file(file: ModelFile) -> Result<Model> {
        file.spec.validate()?;
        file.validate_layout()?;
        let param_bytes = file.param_bytes();
        let mut by_name: std::collections::HashMap<String, Tensor> =
            file.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();
        let mut take = |name: &str| -> Result<Tensor> {
            by_name
                .remove(name)
                .ok_or_else(|| Error::validation(name, "missing from container"))
        };
        let tok_embeddings = take("tok_embeddings.weight")?;
        let mut layers = Vec::with_capacity(file.spec.n_layers);
        for l in 0..file.spec.n_layers {
            let p = format!("layers.{l}");
            layers.push(Layer {
                attention_norm: take(&format!("{p}.attention_norm.weight"))?.dequantize(),
                wq: take(&format!("{p}.attention.wq.weight"))?,
                wk: take(&format!("{p}.attention.wk.weight"))?,
                wv: take(&format!("{p}.attention.wv.weight"))?,
                wo: take(&format!("{p}.attention.wo.weight"))?,
                ffn_norm: take(&format!("{p}.ffn_norm.weight"))?.dequantize(),
                w1: take(&format!("{p}.feed_forward.w1.weight"))?,
                w2: take(&format!("{p}.feed_forward.w2.weight"))?,
                w3: take(&format!("{p}.feed_forward.w3.weight"))?,
            });
        }
        let norm = take("norm.weight")?.dequantize();
        let output = take(OUTPUT_TENSOR)?;
        Ok(Model {
            spec: file.spec,
            scheme: file.scheme,
            tok_embeddings,
            layers,
            norm,
            output,
            param_bytes,
        })
    }
}

/// Reads and materializes a model container; returns the model and the load
/// wall time in seconds.
pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, f64)> {
    let start = Instant::now();
    let file = ModelFile::load(path)?;
    let model = Model::from_file(file)?;
    Ok((model, start.elapsed().as_secs_f64()))
}

/// Which positions produce logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    Last,
    All,
}

/// Runs `tokens` through the graph at the cache's current position, appends
/// their keys/values and advances the cache.
pub fn forward(
    model: &Model,
    kv: &mut KvCache,
    tokens: &[u32],
    ctx: &mut ExecCtx,
    rows: LogitRows,
) -> Result<Matrix> {
    let spec = &model.spec;
    let (d, hd, kv_dim) = (spec.d_model, spec.head_dim(), spec.kv_dim());
    let t_len = tokens.len();
    let p0 = kv.position();
    if t_len == 0 {
        return Err(Error::Shape("forward needs at least one token".into()));
    }
    if t_len > kv.remaining() {
        return Err(Error::Capacity(format!(
            "{t_len} tokens at position {p0} exceed cache capacity {}",
            kv.capacity()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= spec.vocab_size) {
        return Err(Error::Token(bad));
    }

    let mut x = Matrix::zeros(t_len, d);
    for (i, &tok) in tokens.iter().enumerate() {
        model.tok_embeddings.dequantize_row_into(tok as usize, x.row_mut(i));
    }

    let group = spec.n_heads / spec.n_kv_heads;
    let n_heads = spec.n_heads;
    let scale = 1.0 / (hd as f32).sqrt();

    for (l, layer) in model.layers.iter().enumerate() {
        let xn = norm_rows(&x, &layer.attention_norm);
        let mut q = ctx.linear(&xn, &layer.wq)?;
        let mut k = ctx.linear(&xn, &layer.wk)?;
        let v = ctx.linear(&xn, &layer.wv)?;
        for t in 0..t_len {
            rope_apply(q.row_mut(t), hd, p0 + t, spec.rope_base);
            rope_apply(k.row_mut(t), hd, p0 + t, spec.rope_base);
        }
        kv.write(l, &k.data, &v.data);

        let total = p0 + t_len;
        let keys = kv.keys(l, total);
        let values = kv.values(l, total);
        let mut attn = vec![0.0f32; t_len * d];
        ctx.fill(&mut attn, hd, |ci, out| {
            let (t, h) = (ci / n_heads, ci % n_heads);
            let g = h / group;
            let qh = &q.data[t * d + h * hd..t * d + (h + 1) * hd];
            let span = p0 + t + 1;
            let mut scores: Vec<f32> = (0..span)
                .map(|j| dot(qh, &keys[j * kv_dim + g * hd..j * kv_dim + (g + 1) * hd]))
                .collect();
            softmax_in_place(&mut scores, scale);
            for (j, w) in scores.iter().enumerate() {
                let vj = &values[j * kv_dim + g * hd..j * kv_dim + (g + 1) * hd];
                for (o, vv) in out.iter_mut().zip(vj) {
                    *o += w * vv;
                }
            }
        });
        // scores and weighted values: 2·hd each per (query, key, head)
        let pairs: u64 = (0..t_len).map(|t| (p0 + t + 1) as u64).sum();
        ctx.add_flops(4 * (n_heads * hd) as u64 * pairs);

        let o = ctx.linear(&Matrix::new(t_len, d, attn), &layer.wo)?;
        add_in_place(&mut x, &o);

        let xn = norm_rows(&x, &layer.ffn_norm);
        let mut gate = ctx.linear(&xn, &layer.w1)?;
        let up = ctx.linear(&xn, &layer.w3)?;
        for (g, u) in gate.data.iter_mut().zip(&up.data) {
            *g = silu(*g) * u;
        }
        let down = ctx.linear(&gate, &layer.w2)?;
        add_in_place(&mut x, &down);
    }
    kv.advance(t_len);

    let x = match rows {
        LogitRows::All => x,
        LogitRows::Last => Matrix::new(1, d, x.row(t_len - 1).to_vec()),
    };
    let xn = norm_rows(&x, &model.norm);
    ctx.linear(&xn, &model.output)
}

fn norm_rows(x: &Matrix, gain: &[f32]) -> Matrix {
    let mut out = Vec::with_capacity(x.data.len());
    for i in 0..x.rows {
        out.extend(rmsnorm(x.row(i), gain, NORM_EPS));
    }
    Matrix::new(x.rows, x.cols, out)
}

fn add_in_place(x: &mut Matrix, y: &Matrix) {
    for (a, b) in x.data.iter_mut().zip(&y.data) {
        *a += b;
    }
}

/// Processes the prompt on an empty cache; returns last-token logits.
pub fn prefill(model: &Model, kv: &mut KvCache, tokens: &[u32], ctx: &mut ExecCtx) -> Result<Vec<f32>> {
    if kv.position() != 0 {
        return Err(Error::Capacity(format!(
            "prefill needs an empty cache, position is {}",
            kv.position()
        )));
    }
    if tokens.is_empty() {
        return Err(Error::Shape("empty prompt".into()));
    }
    Ok(forward(model, kv, tokens, ctx, LogitRows::Last)?.data)
}

/// Appends one token to a primed cache; returns its logits.
pub fn decode_step(model: &Model, kv: &mut KvCache, token: u32, ctx: &mut ExecCtx) -> Result<Vec<f32>> {
    if kv.position() == 0 {
        return Err(Error::Capacity("decode_step needs a prefilled cache".into()));
    }
    if kv.position() >= kv.capacity() {
        return Err(Error::Capacity(format!(
            "cache full at {} tokens",
            kv.capacity()
        )));
    }
    Ok(forward(model, kv, &[token], ctx, LogitRows::Last)?.data)
}
