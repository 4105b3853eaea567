//! Benchmark metrics: FLOPS, throughput, latency, perplexity and model
//! bandwidth utilization (MBU), plus deployment feasibility checks.
//!
//! MBU = achieved bandwidth / peak bandwidth, where achieved bandwidth is
//! `(parameter bytes + KV cache bytes) / TPOT`.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quant::QuantScheme;
use crate::runtime::{allocate_kv_cache, forward, BackendKind, ExecCtx, InferenceTrace, LogitRows, Matrix, Model};
use crate::textio::EvalCorpus;

pub const GIB: u64 = 1 << 30;

/// Hardware description used for MBU and memory feasibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    /// Bytes per second.
    pub peak_bandwidth: f64,
    pub ram_bytes: u64,
    pub thread_counts: Vec<usize>,
}

impl DeviceProfile {
    pub fn preset(name: &str) -> Option<DeviceProfile> {
        let peak = match name {
            "nanopi" => 34e9,
            "xiaomi" => 26e9,
            "macbook_m2" => 50e9,
            _ => return None,
        };
        Some(DeviceProfile {
            name: name.to_string(),
            peak_bandwidth: peak,
            ram_bytes: 16 * GIB,
            thread_counts: vec![4, 8],
        })
    }

    pub fn preset_names() -> [&'static str; 3] {
        ["nanopi", "xiaomi", "macbook_m2"]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_bandwidth.is_finite() && self.peak_bandwidth > 0.0) {
            return Err(Error::Config(format!(
                "device `{}`: peak_bandwidth must be positive",
                self.name
            )));
        }
        if self.ram_bytes == 0 {
            return Err(Error::Config(format!("device `{}`: ram_bytes must be positive", self.name)));
        }
        if self.thread_counts.contains(&0) {
            return Err(Error::Config("thread counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Timeout,
    MemoryOverflow,
    Deadlock,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::Timeout => "timeout",
            SkipReason::MemoryOverflow => "memory_overflow",
            SkipReason::Deadlock => "deadlock",
        })
    }
}

impl std::str::FromStr for SkipReason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "timeout" => Ok(SkipReason::Timeout),
            "memory_overflow" => Ok(SkipReason::MemoryOverflow),
            "deadlock" => Ok(SkipReason::Deadlock),
            other => Err(Error::Config(format!("unknown skip reason `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Skipped(SkipReason),
}

pub const MBU_FLAG: &str = "check peak bandwidth";

/// One row of results for a (device, scheme, backend) configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub device: String,
    pub scheme: QuantScheme,
    pub backend: BackendKind,
    /// Kernel threads used for generation.
    pub threads: usize,
    /// GFLOPS per swept thread count.
    #[serde(rename = "gflops")]
    pub flops_by_threads: BTreeMap<usize, f64>,
    #[serde(rename = "tok_per_s")]
    pub throughput: Option<f64>,
    #[serde(rename = "ttlm_s")]
    pub ttlm: f64,
    #[serde(rename = "ttft_s")]
    pub ttft: f64,
    #[serde(rename = "tpot_s")]
    pub tpot: Option<f64>,
    pub mbu: Option<f64>,
    /// Set when MBU exceeds 1.
    pub mbu_flag: Option<String>,
    /// Bytes per second.
    pub achieved_bandwidth: Option<f64>,
    pub perplexity: Option<f64>,
    /// Set when a latency budget was configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ok: Option<bool>,
    pub param_bytes: u64,
    pub kv_bytes: u64,
    pub kv_filled_bytes: u64,
    pub flop_count: u64,
    pub n_prompt_tokens: usize,
    pub n_generated_tokens: usize,
    /// Generated token ids, one list per prompt.
    pub generated: Vec<Vec<u32>>,
    pub status: RunStatus,
}

/// KV cache bytes:
/// `batch × seqlen × (d_model / n_heads) × n_layers × n_kv_heads × databyte × 2`.
pub fn kv_cache_size(spec: &ModelSpec, batch: usize, seqlen: usize, databyte: usize) -> Result<u64> {
    if spec.n_heads == 0 || !spec.d_model.is_multiple_of(spec.n_heads) {
        return Err(Error::Spec(format!(
            "d_model {} is not divisible by n_heads {}",
            spec.d_model, spec.n_heads
        )));
    }
    let head_dim = (spec.d_model / spec.n_heads) as u64;
    Ok(batch as u64
        * seqlen as u64
        * head_dim
        * spec.n_layers as u64
        * spec.n_kv_heads as u64
        * databyte as u64
        * 2)
}

/// Bytes per second streamed while generating one token.
pub fn achieved_bandwidth(param_bytes: f64, kv_bytes: f64, tpot_seconds: f64) -> Result<f64> {
    if !(tpot_seconds > 0.0) {
        return Err(Error::Metric(format!("TPOT must be positive, got {tpot_seconds}")));
    }
    if param_bytes < 0.0 || kv_bytes < 0.0 {
        return Err(Error::Metric("byte sizes must be non-negative".into()));
    }
    Ok((param_bytes + kv_bytes) / tpot_seconds)
}

/// Model bandwidth utilization. Values above 1 are returned unclamped.
pub fn mbu(achieved: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Metric(format!("peak bandwidth must be positive, got {peak}")));
    }
    Ok(achieved / peak)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyMetrics {
    /// Tokens per second after the first token; absent for single-token runs.
    pub throughput: Option<f64>,
    pub ttlm: f64,
    pub ttft: f64,
    pub tpot: Option<f64>,
}

pub fn throughput_and_latency(trace: &InferenceTrace) -> Result<LatencyMetrics> {
    if trace.n_generated_tokens == 0 {
        return Err(Error::Metric("trace has no generated tokens".into()));
    }
    let ttft = trace.t_first_token - trace.t_prompt_start;
    let span = trace.t_last_token - trace.t_first_token;
    let throughput = (trace.n_generated_tokens >= 2 && span > 0.0)
        .then(|| (trace.n_generated_tokens - 1) as f64 / span);
    Ok(LatencyMetrics {
        throughput,
        ttlm: trace.t_load,
        ttft,
        tpot: throughput.map(|t| 1.0 / t),
    })
}

/// Time source for the FLOPS microbenchmark, in seconds.
pub trait Clock {
    fn now(&self) -> f64;
}

/// Wall clock anchored at construction.
pub struct WallClock(Instant);

impl Default for WallClock {
    fn default() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatmulDims {
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulDims {
    pub fn square(n: usize) -> Self {
        MatmulDims { m: n, k: n, n }
    }

    /// Exact flop count of one product.
    pub fn flops(&self) -> u64 {
        2 * self.m as u64 * self.k as u64 * self.n as u64
    }
}

/// GFLOPS from per-repetition timings, using their median.
pub fn gflops_from_timings(flops_per_rep: u64, timings: &[f64]) -> Result<f64> {
    if timings.is_empty() {
        return Err(Error::Metric("no timings".into()));
    }
    let reps = timings.len() as f64;
    let elapsed = median(timings).unwrap() * reps;
    if !(elapsed > 0.0) {
        return Err(Error::Metric(
            "elapsed time is zero; the clock is too coarse, use larger dims".into(),
        ));
    }
    Ok(reps * flops_per_rep as f64 / (elapsed * 1e9))
}

/// Times `repetitions` seeded matrix products on `backend` with `threads`.
pub fn flops_microbench(
    backend: BackendKind,
    threads: usize,
    dims: MatmulDims,
    repetitions: usize,
    clock: &dyn Clock,
) -> Result<f64> {
    if dims.m < 64 || dims.k < 64 || dims.n < 64 {
        return Err(Error::Metric("matmul dims must be at least 64".into()));
    }
    if repetitions < 3 {
        return Err(Error::Metric("at least 3 repetitions are required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut random = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let a = Matrix::new(dims.m, dims.k, random(dims.m * dims.k));
    let b = Matrix::new(dims.k, dims.n, random(dims.k * dims.n)).into_tensor("bench.b");
    let mut ctx = ExecCtx::new(backend, threads);
    let mut timings = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = clock.now();
        let out = ctx.matmul(&a, &b)?;
        std::hint::black_box(&out);
        timings.push(clock.now() - start);
    }
    debug_assert_eq!(ctx.flops(), dims.flops() * repetitions as u64);
    gflops_from_timings(dims.flops(), &timings)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

/// Anything that can score a token window by predicting each next token.
pub trait LogitSource {
    /// Logits for positions `0..window.len() - 1`, each predicting the
    /// following token.
    fn window_logits(&self, window: &[u32]) -> Result<Vec<Vec<f32>>>;
}

/// Teacher-forced scoring with the transformer on a fresh cache per window.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub backend: BackendKind,
    pub threads: usize,
}

impl LogitSource for ModelScorer<'_> {
    fn window_logits(&self, window: &[u32]) -> Result<Vec<Vec<f32>>> {
        let inputs = &window[..window.len().saturating_sub(1)];
        let mut kv = allocate_kv_cache(&self.model.spec, 1, inputs.len(), 4)?;
        let mut ctx = ExecCtx::new(self.backend, self.threads);
        let logits = forward(self.model, &mut kv, inputs, &mut ctx, LogitRows::All)?;
        Ok((0..logits.rows).map(|i| logits.row(i).to_vec()).collect())
    }
}

/// `exp(total NLL / predicted positions)` over every window.
pub fn perplexity(source: &dyn LogitSource, corpus: &EvalCorpus) -> Result<f64> {
    if corpus.windows.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for window in &corpus.windows {
        if window.len() < 2 {
            return Err(Error::Metric("windows need at least 2 tokens".into()));
        }
        let logits = source.window_logits(window)?;
        if logits.len() != window.len() - 1 {
            return Err(Error::Metric(format!(
                "expected {} logit rows, got {}",
                window.len() - 1,
                logits.len()
            )));
        }
        for (row, &target) in logits.iter().zip(&window[1..]) {
            let target = row
                .get(target as usize)
                .ok_or(Error::Token(target))?;
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            nll += lse - *target as f64;
            count += 1;
        }
    }
    Ok((nll / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeasibilityFailure {
    Memory,
    Latency,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub failures: Vec<FeasibilityFailure>,
    /// Parameter plus KV bytes that must be resident.
    pub required_bytes: u64,
    /// TTFT + TPOT × output tokens.
    pub total_latency: f64,
}

impl Feasibility {
    pub fn passes(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Inputs of a deployment feasibility check.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityQuery<'a> {
    pub spec: &'a ModelSpec,
    pub param_bytes: u64,
    pub databyte: usize,
    pub batch: usize,
    pub seqlen: usize,
    pub ttft: f64,
    pub tpot: f64,
    pub n_out: usize,
    pub latency_budget: Option<f64>,
}

/// Memory: parameters plus KV cache must fit device RAM. Latency:
/// `ttft + tpot × n_out` must fit the budget, when one is given.
pub fn feasibility_check(query: &FeasibilityQuery<'_>, device: &DeviceProfile) -> Result<Feasibility> {
    let kv = kv_cache_size(query.spec, query.batch, query.seqlen, query.databyte)?;
    let required_bytes = query.param_bytes + kv;
    let total_latency = query.ttft + query.tpot * query.n_out as f64;
    let mut failures = Vec::new();
    if required_bytes > device.ram_bytes {
        failures.push(FeasibilityFailure::Memory);
    }
    if query.latency_budget.is_some_and(|b| total_latency > b) {
        failures.push(FeasibilityFailure::Latency);
    }
    Ok(Feasibility {
        failures,
        required_bytes,
        total_latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(n: usize, first: f64, last: f64) -> InferenceTrace {
        InferenceTrace {
            t_load: 0.25,
            t_prompt_start: 1.0,
            t_first_token: first,
            t_last_token: last,
            n_prompt_tokens: 4,
            n_generated_tokens: n,
            flop_count: 1,
            kv_bytes: 0,
            kv_filled_bytes: 0,
        }
    }

    #[test]
    fn kv_cache_fixtures() {
        let llama = ModelSpec::llama_7b();
        assert_eq!(kv_cache_size(&llama, 1, 2048, 2).unwrap(), 1_073_741_824);
        assert_eq!(kv_cache_size(&llama, 1, 0, 2).unwrap(), 0);
        let tiny = ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 2,
            n_layers: 3,
            ..ModelSpec::tiny()
        };
        assert_eq!(kv_cache_size(&tiny, 2, 16, 4).unwrap(), 6144);
        let bad = ModelSpec {
            n_heads: 3,
            ..tiny
        };
        assert!(matches!(kv_cache_size(&bad, 1, 1, 4), Err(Error::Spec(_))));
    }

    #[test]
    fn bandwidth_and_mbu() {
        assert_eq!(achieved_bandwidth(3.5e9, 0.0, 0.1).unwrap(), 3.5e10);
        assert_eq!(achieved_bandwidth(0.0, 0.0, 0.1).unwrap(), 0.0);
        assert_eq!(achieved_bandwidth(1e9, 1e9, 1.0).unwrap(), 2e9);
        assert!(achieved_bandwidth(1.0, 1.0, 0.0).is_err());
        assert!((mbu(3.5e10, 5.0e10).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(mbu(5.0e10, 5.0e10).unwrap(), 1.0);
        assert_eq!(mbu(0.0, 5.0e10).unwrap(), 0.0);
        assert!(mbu(1.0, 0.0).is_err());
        assert!((mbu(6.9e10, 5.0e10).unwrap() - 1.38).abs() < 1e-12);
    }

    #[test]
    fn latency_from_trace() {
        let m = throughput_and_latency(&trace(65, 1.5, 9.5)).unwrap();
        assert_eq!(m.throughput, Some(8.0));
        assert_eq!(m.tpot, Some(0.125));
        assert_eq!(m.ttft, 0.5);
        assert_eq!(m.ttlm, 0.25);
        let single = throughput_and_latency(&trace(1, 1.0, 1.0)).unwrap();
        assert_eq!(single.throughput, None);
        assert_eq!(single.ttft, 0.0);
        assert!(throughput_and_latency(&trace(0, 1.0, 1.0)).is_err());
    }

    struct Ticker(std::cell::Cell<f64>, f64);

    impl Clock for Ticker {
        fn now(&self) -> f64 {
            let t = self.0.get();
            self.0.set(t + self.1 / 2.0);
            t
        }
    }

    #[test]
    fn gflops_normalization() {
        let flops = MatmulDims::square(256).flops();
        let g = gflops_from_timings(flops, &[0.01]).unwrap();
        assert!((g - 3.3554432).abs() < 1e-12);
        assert_eq!(gflops_from_timings(flops, &[0.01; 6]).unwrap(), g);
        assert_eq!(MatmulDims::square(1024).flops(), 2_147_483_648);
        assert!(gflops_from_timings(flops, &[0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn microbench_with_fake_clock() {
        // every rep appears to take 0.01 s
        let clock = Ticker(std::cell::Cell::new(0.0), 0.02);
        let g = flops_microbench(BackendKind::Threaded, 2, MatmulDims::square(64), 3, &clock).unwrap();
        assert!((g - 2.0 * 64f64.powi(3) / 1e7 / 1.0).abs() < 1e-9, "{g}");
        assert!(flops_microbench(BackendKind::Naive, 1, MatmulDims::square(32), 3, &clock).is_err());
        assert!(flops_microbench(BackendKind::Naive, 1, MatmulDims::square(64), 2, &clock).is_err());
    }

    struct Fixed(Vec<Vec<f32>>);

    impl LogitSource for Fixed {
        fn window_logits(&self, window: &[u32]) -> Result<Vec<Vec<f32>>> {
            Ok(self.0[..window.len() - 1].to_vec())
        }
    }

    #[test]
    fn perplexity_oracles() {
        let corpus = EvalCorpus::from_tokens(&[0, 1, 2, 3, 4], 5, 5).unwrap();
        let uniform = Fixed(vec![vec![0.25; 259]; 4]);
        assert!((perplexity(&uniform, &corpus).unwrap() - 259.0).abs() < 1e-6);

        let ninf = f32::NEG_INFINITY;
        let hand = Fixed(vec![
            vec![0.0, 0.0, ninf, ninf, ninf, ninf, ninf, ninf],
            vec![0.0; 8],
        ]);
        let corpus = EvalCorpus::from_tokens(&[5, 1, 2], 3, 1).unwrap();
        assert!((perplexity(&hand, &corpus).unwrap() - 4.0).abs() < 1e-9);

        let empty = EvalCorpus {
            windows: vec![],
            context_len: 4,
            stride: 4,
        };
        assert!(perplexity(&uniform, &empty).is_err());
    }

    #[test]
    fn feasibility() {
        let llama = ModelSpec::llama_7b();
        let small = DeviceProfile {
            ram_bytes: 4_000_000_000,
            ..DeviceProfile::preset("macbook_m2").unwrap()
        };
        let q = FeasibilityQuery {
            spec: &llama,
            param_bytes: 3_500_000_000,
            databyte: 2,
            batch: 1,
            seqlen: 2048,
            ttft: 1.0,
            tpot: 0.1,
            n_out: 50,
            latency_budget: Some(6.0),
        };
        let f = feasibility_check(&q, &small).unwrap();
        assert_eq!(f.failures, vec![FeasibilityFailure::Memory]);

        let big = DeviceProfile::preset("macbook_m2").unwrap();
        assert!(feasibility_check(&q, &big).unwrap().passes());
        let tight = FeasibilityQuery {
            latency_budget: Some(5.9),
            ..q
        };
        assert_eq!(
            feasibility_check(&tight, &big).unwrap().failures,
            vec![FeasibilityFailure::Latency]
        );
    }

    #[test]
    fn presets() {
        assert_eq!(DeviceProfile::preset("nanopi").unwrap().peak_bandwidth, 34e9);
        assert_eq!(DeviceProfile::preset("xiaomi").unwrap().peak_bandwidth, 26e9);
        assert_eq!(DeviceProfile::preset("macbook_m2").unwrap().ram_bytes, 16 * GIB);
        assert!(DeviceProfile::preset("pixel").is_none());
    }
}
