use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::graph::{decode_step, prefill, Model};
use crate::runtime::kernels::ExecCtx;
use crate::runtime::kv::KvCache;
use crate::runtime::sample::{sample, GenerationParams};

/// Timestamps (seconds since the session epoch) and counters of one
/// generation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub t_load: f64,
    pub t_prompt_start: f64,
    pub t_first_token: f64,
    pub t_last_token: f64,
    pub n_prompt_tokens: usize,
    pub n_generated_tokens: usize,
    pub flop_count: u64,
    /// Cache size at capacity.
    pub kv_bytes: u64,
    /// Cache size of the filled prefix when generation ended.
    pub kv_filled_bytes: u64,
}

/// Called at every token boundary with the number of tokens produced so far.
/// Returning an error stops generation.
pub trait TokenObserver {
    fn on_token(&mut self, generated: usize) -> Result<()>;
}

impl TokenObserver for () {
    fn on_token(&mut self, _: usize) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(usize) -> Result<()>> TokenObserver for F {
    fn on_token(&mut self, generated: usize) -> Result<()> {
        self(generated)
    }
}

/// Generates up to `params.max_new_tokens` tokens after `prompt`.
///
/// `epoch` anchors the trace timestamps; `t_load` is copied into the trace.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &Model,
    ctx: &mut ExecCtx,
    kv: &mut KvCache,
    prompt: &[u32],
    params: &GenerationParams,
    epoch: Instant,
    t_load: f64,
    observer: &mut dyn TokenObserver,
) -> Result<(Vec<u32>, InferenceTrace)> {
    params.validate(model.spec.vocab_size)?;
    if prompt.len() > kv.remaining() {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens does not fit cache capacity {}",
            prompt.len(),
            kv.capacity()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let flops_before = ctx.flops();
    let mut history = prompt.to_vec();
    let mut generated = Vec::with_capacity(params.max_new_tokens);

    let t_prompt_start = epoch.elapsed().as_secs_f64();
    let mut logits = prefill(model, kv, prompt, ctx)?;
    let mut last = sample(&logits, &history, params, &mut rng)?;
    generated.push(last);
    history.push(last);
    let t_first_token = epoch.elapsed().as_secs_f64();
    observer.on_token(1)?;

    let mut t_last_token = t_first_token;
    while generated.len() < params.max_new_tokens && Some(last) != params.eos_token {
        logits = decode_step(model, kv, last, ctx)?;
        last = sample(&logits, &history, params, &mut rng)?;
        generated.push(last);
        history.push(last);
        t_last_token = epoch.elapsed().as_secs_f64();
        observer.on_token(generated.len())?;
    }

    let trace = InferenceTrace {
        t_load,
        t_prompt_start,
        t_first_token,
        t_last_token,
        n_prompt_tokens: prompt.len(),
        n_generated_tokens: generated.len(),
        flop_count: ctx.flops() - flops_before,
        kv_bytes: kv.allocated_bytes(),
        kv_filled_bytes: kv.filled_bytes(&model.spec),
    };
    Ok((generated, trace))
}
