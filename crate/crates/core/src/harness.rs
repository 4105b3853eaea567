//! Benchmark orchestration: quantize once, then for every iteration and
//! scheme deploy the model, run guarded inference, compute metrics and record
//! an outcome. Failed runs are recorded as skipped and the sweep continues.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::BenchConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    self, achieved_bandwidth, feasibility_check, flops_microbench, kv_cache_size, median,
    throughput_and_latency, DeviceProfile, FeasibilityFailure, FeasibilityQuery, MatmulDims,
    MetricsReport, ModelScorer, RunStatus, SkipReason, WallClock,
};
use crate::model::{quantize_model, ModelFile};
use crate::quant::QuantScheme;
use crate::report::ReportDocument;
use crate::runtime::{
    allocate_kv_cache, generate, load_model, BackendKind, ExecCtx, GenerationParams,
    InferenceTrace, Model,
};
use crate::textio::{load_corpus, load_prompts, EvalCorpus, Tokenizer, BOS};

/// Prompt used when the config names no prompt file.
pub const DEFAULT_PROMPT: &str = "The quick brown fox jumps over the lazy dog.";

/// Environment variable holding failure-injection switches for tests.
pub const INJECT_ENV: &str = "ELIB_INJECT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeResult {
    Ok(Box<MetricsReport>),
    Skipped { reason: SkipReason, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub scheme: QuantScheme,
    /// 1-based.
    pub iteration: usize,
    pub result: OutcomeResult,
}

impl RunOutcome {
    pub fn report(&self) -> Option<&MetricsReport> {
        match &self.result {
            OutcomeResult::Ok(report) => Some(report),
            OutcomeResult::Skipped { .. } => None,
        }
    }

    pub fn skip_reason(&self) -> Option<SkipReason> {
        match &self.result {
            OutcomeResult::Skipped { reason, .. } => Some(*reason),
            OutcomeResult::Ok(_) => None,
        }
    }
}

/// Forces a failure mode for one (scheme, iteration) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Injection {
    pub scheme: QuantScheme,
    pub iteration: usize,
    pub reason: SkipReason,
}

/// Parses `scheme:iteration:reason` items separated by commas,
/// e.g. `q5_0:1:timeout,q4_0:2:deadlock`.
pub fn parse_injections(spec: &str) -> Result<Vec<Injection>> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let parts: Vec<&str> = item.split(':').collect();
            let [scheme, iteration, reason] = parts[..] else {
                return Err(Error::Config(format!(
                    "injection `{item}` must look like scheme:iteration:reason"
                )));
            };
            Ok(Injection {
                scheme: scheme.parse()?,
                iteration: iteration
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad iteration in injection `{item}`")))?,
                reason: reason.parse()?,
            })
        })
        .collect()
}

/// Injections named by [`INJECT_ENV`], if set.
pub fn injections_from_env() -> Result<Vec<Injection>> {
    match std::env::var(INJECT_ENV) {
        Ok(v) => parse_injections(&v),
        Err(_) => Ok(Vec::new()),
    }
}

/// Path of the cached quantized container beside the source model.
pub fn quantized_path(source: &Path, scheme: QuantScheme) -> PathBuf {
    let stem = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    source.with_file_name(format!("{stem}.{scheme}.elib"))
}

struct Inputs {
    prompts: Vec<Vec<u32>>,
    corpus: Option<EvalCorpus>,
    device: DeviceProfile,
}

pub fn run_benchmark(config: &BenchConfig) -> Result<ReportDocument> {
    run_benchmark_with(config, &[])
}

pub fn run_benchmark_with(config: &BenchConfig, injections: &[Injection]) -> Result<ReportDocument> {
    config.validate()?;
    let device = config.device_params.device()?;
    let params = &config.benchmark_params;

    let source = ModelFile::load(&config.original_model).map_err(|e| {
        Error::Config(format!("cannot read model {}: {e}", config.original_model.display()))
    })?;
    source.validate_layout()?;
    config
        .benchmark_params
        .generation()
        .validate(source.spec.vocab_size)?;

    let prompt_text = match &config.prompt_data {
        Some(p) => load_prompts(p)?,
        None => vec![DEFAULT_PROMPT.to_string()],
    };
    if prompt_text.is_empty() {
        return Err(Error::Config("prompt file holds no prompts".into()));
    }
    let prompts: Vec<Vec<u32>> = prompt_text
        .iter()
        .map(|p| {
            let mut toks = vec![BOS];
            toks.extend(Tokenizer.encode(p.as_bytes()));
            toks
        })
        .collect();
    let longest = prompts.iter().map(Vec::len).max().unwrap_or(0);
    if longest + params.max_new_tokens > source.spec.max_seq + 1 {
        return Err(Error::Config(format!(
            "longest prompt ({longest} tokens) plus max_new_tokens exceeds max_seq {}",
            source.spec.max_seq
        )));
    }
    let corpus = match &config.corpus {
        Some(p) => {
            if params.context_len > source.spec.max_seq + 1 {
                return Err(Error::Config("context_len exceeds the model context".into()));
            }
            Some(load_corpus(p, params.context_len, params.stride)?)
        }
        None => None,
    };

    // quantize once, before the iteration loop
    let mut deployed_paths = Vec::with_capacity(config.quantization_params.len());
    for &scheme in &config.quantization_params {
        let path = quantized_path(&config.original_model, scheme);
        quantize_model(&source, scheme)?.save(&path)?;
        deployed_paths.push((scheme, path));
    }

    let inputs = Inputs {
        prompts,
        corpus,
        device: device.clone(),
    };
    let mut outcomes = Vec::new();
    for iteration in 1..=params.iteration {
        for (scheme, path) in &deployed_paths {
            let injected = injections
                .iter()
                .find(|i| i.scheme == *scheme && i.iteration == iteration)
                .map(|i| i.reason);
            let result = run_cell(config, &inputs, *scheme, path, injected)?;
            outcomes.push(RunOutcome {
                scheme: *scheme,
                iteration,
                result,
            });
        }
    }

    let aggregates = aggregate(&outcomes);
    Ok(ReportDocument {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        device,
        outcomes,
        aggregates,
    })
}

/// A loaded model ready for inference on the selected kernels.
pub struct DeployedModel {
    pub model: Arc<Model>,
    pub t_load: f64,
    pub backend: BackendKind,
    pub threads: usize,
    pub kv_capacity: usize,
    pub kv_bytes: u64,
}

/// Loads the quantized model, selects kernels and sizes the KV cache.
/// Returns `Ok(Err(reason))` when the deployment does not fit the device.
pub fn adapt_and_deploy(
    path: &Path,
    config: &BenchConfig,
    device: &DeviceProfile,
    longest_prompt: usize,
) -> Result<std::result::Result<DeployedModel, (SkipReason, String)>> {
    let params = &config.benchmark_params;
    let (model, t_load) = load_model(path)?;
    let backend = config.device_params.backend;
    let threads = match backend {
        BackendKind::Naive => 1,
        BackendKind::Threaded => device.thread_counts.iter().copied().max().unwrap_or(1),
    };
    let kv_capacity = (longest_prompt + params.max_new_tokens).min(model.spec.max_seq);
    let kv_bytes = kv_cache_size(&model.spec, params.batch, kv_capacity, params.kv_databyte)?;

    let check = feasibility_check(
        &FeasibilityQuery {
            spec: &model.spec,
            param_bytes: model.param_bytes,
            databyte: params.kv_databyte,
            batch: params.batch,
            seqlen: kv_capacity,
            ttft: 0.0,
            tpot: 0.0,
            n_out: 0,
            latency_budget: None,
        },
        device,
    )?;
    if check.failures.contains(&FeasibilityFailure::Memory) {
        return Ok(Err((
            SkipReason::MemoryOverflow,
            format!(
                "needs {} bytes, device `{}` has {}",
                check.required_bytes, device.name, device.ram_bytes
            ),
        )));
    }
    Ok(Ok(DeployedModel {
        model: Arc::new(model),
        t_load,
        backend,
        threads,
        kv_capacity,
        kv_bytes,
    }))
}

/// Limits enforced around one inference run.
#[derive(Debug, Clone, Copy)]
pub struct Guard {
    pub timeout: Duration,
    /// Silence allowed beyond `timeout` before the run counts as stalled.
    pub stall_grace: Duration,
    pub memory_limit_bytes: Option<u64>,
    pub batch: usize,
    pub databyte: usize,
    /// Test hook: simulate one of the failure modes.
    pub inject: Option<SkipReason>,
}

type Traces = Vec<(Vec<u32>, InferenceTrace)>;

/// Runs every prompt under a wall-clock deadline, an allocation budget and a
/// no-progress watchdog. Failures come back as a skip reason, never as an
/// error; only unexpected internal failures surface as `Err`.
pub fn guarded_inference(
    deployed: &DeployedModel,
    prompts: &[Vec<u32>],
    params: &GenerationParams,
    guard: &Guard,
) -> Result<std::result::Result<Traces, (SkipReason, String)>> {
    let budget = match guard.inject {
        Some(SkipReason::MemoryOverflow) => Some(0),
        _ => guard.memory_limit_bytes,
    };
    let needed = deployed.model.param_bytes + deployed.kv_bytes;
    if let Some(limit) = budget {
        if needed > limit {
            return Ok(Err((
                SkipReason::MemoryOverflow,
                format!("needs {needed} bytes, allocation budget is {limit}"),
            )));
        }
    }

    let timeout = match guard.inject {
        Some(SkipReason::Timeout) => Duration::ZERO,
        _ => guard.timeout,
    };
    let stall = guard.inject == Some(SkipReason::Deadlock);
    let heartbeat = Arc::new(AtomicU64::new(0));
    let cancel = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();

    let session = {
        let model = Arc::clone(&deployed.model);
        let prompts = prompts.to_vec();
        let params = params.clone();
        let heartbeat = Arc::clone(&heartbeat);
        let cancel = Arc::clone(&cancel);
        let (backend, threads, capacity, t_load) =
            (deployed.backend, deployed.threads, deployed.kv_capacity, deployed.t_load);
        let (batch, databyte) = (guard.batch, guard.databyte);
        move || {
            let start = Instant::now();
            let mut observer = |_: usize| -> Result<()> {
                heartbeat.fetch_add(1, Ordering::Relaxed);
                if stall {
                    while !cancel.load(Ordering::Relaxed) {
                        thread::sleep(Duration::from_millis(1));
                    }
                }
                if cancel.load(Ordering::Relaxed) {
                    return Err(Error::Aborted("cancelled".into()));
                }
                if start.elapsed() > timeout {
                    return Err(Error::Aborted("timeout".into()));
                }
                Ok(())
            };
            let mut run = || -> Result<Traces> {
                let mut out = Vec::with_capacity(prompts.len());
                for prompt in &prompts {
                    let mut kv = allocate_kv_cache(&model.spec, batch, capacity, databyte)?;
                    let mut ctx = ExecCtx::new(backend, threads);
                    out.push(generate(
                        &model,
                        &mut ctx,
                        &mut kv,
                        prompt,
                        &params,
                        start,
                        t_load,
                        &mut observer,
                    )?);
                }
                Ok(out)
            };
            let _ = tx.send(run());
        }
    };
    let handle = thread::Builder::new()
        .name("elib-session".into())
        .spawn(session)?;

    let stall_window = guard.timeout + guard.stall_grace;
    let poll = (stall_window / 4).clamp(Duration::from_millis(1), Duration::from_millis(20));
    let mut last_beat = 0;
    let mut last_progress = Instant::now();
    loop {
        match rx.recv_timeout(poll) {
            Ok(result) => {
                let _ = handle.join();
                return match result {
                    Ok(traces) => Ok(Ok(traces)),
                    Err(Error::Aborted(msg)) if msg == "timeout" => Ok(Err((
                        SkipReason::Timeout,
                        format!("exceeded {:.3} s", timeout.as_secs_f64()),
                    ))),
                    Err(Error::Capacity(msg)) => Ok(Err((SkipReason::MemoryOverflow, msg))),
                    Err(e) => Err(e),
                };
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {
                let beat = heartbeat.load(Ordering::Relaxed);
                if beat != last_beat {
                    last_beat = beat;
                    last_progress = Instant::now();
                } else if last_progress.elapsed() > stall_window {
                    // the session is abandoned; it exits at its next token boundary
                    cancel.store(true, Ordering::Relaxed);
                    return Ok(Err((
                        SkipReason::Deadlock,
                        format!(
                            "no token progress for {:.3} s",
                            last_progress.elapsed().as_secs_f64()
                        ),
                    )));
                }
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                let _ = handle.join();
                return Err(Error::Aborted("inference session panicked".into()));
            }
        }
    }
}

fn run_cell(
    config: &BenchConfig,
    inputs: &Inputs,
    scheme: QuantScheme,
    path: &Path,
    injected: Option<SkipReason>,
) -> Result<OutcomeResult> {
    let params = &config.benchmark_params;
    let device = &inputs.device;
    let longest = inputs.prompts.iter().map(Vec::len).max().unwrap_or(1);
    let deployed = match adapt_and_deploy(path, config, device, longest)? {
        Ok(d) => d,
        Err((reason, detail)) => return Ok(OutcomeResult::Skipped { reason, detail }),
    };

    let guard = Guard {
        timeout: Duration::from_secs_f64(params.timeout_seconds),
        stall_grace: Duration::from_secs_f64(params.stall_grace_seconds),
        memory_limit_bytes: params.memory_limit_bytes,
        batch: params.batch,
        databyte: params.kv_databyte,
        inject: injected,
    };
    let gen = params.generation();
    let traces = match guarded_inference(&deployed, &inputs.prompts, &gen, &guard)? {
        Ok(t) => t,
        Err((reason, detail)) => return Ok(OutcomeResult::Skipped { reason, detail }),
    };

    let sweep: Vec<usize> = match deployed.backend {
        BackendKind::Naive => vec![1],
        BackendKind::Threaded => device.thread_counts.clone(),
    };
    let clock = WallClock::default();
    let mut flops_by_threads = BTreeMap::new();
    for threads in sweep {
        let g = flops_microbench(
            deployed.backend,
            threads,
            MatmulDims::square(params.flops_dim),
            params.flops_repetitions,
            &clock,
        )?;
        flops_by_threads.insert(threads, g);
    }

    let perplexity = match &inputs.corpus {
        Some(corpus) => Some(metrics::perplexity(
            &ModelScorer {
                model: &deployed.model,
                backend: deployed.backend,
                threads: deployed.threads,
            },
            corpus,
        )?),
        None => None,
    };

    let report = build_report(config, device, &deployed, scheme, &traces, flops_by_threads, perplexity)?;
    Ok(OutcomeResult::Ok(Box::new(report)))
}

fn build_report(
    config: &BenchConfig,
    device: &DeviceProfile,
    deployed: &DeployedModel,
    scheme: QuantScheme,
    traces: &Traces,
    flops_by_threads: BTreeMap<usize, f64>,
    perplexity: Option<f64>,
) -> Result<MetricsReport> {
    let mut ttft = Vec::new();
    let (mut steady_tokens, mut steady_span) = (0usize, 0.0f64);
    for (_, trace) in traces {
        let m = throughput_and_latency(trace)?;
        ttft.push(m.ttft);
        if trace.n_generated_tokens >= 2 {
            steady_tokens += trace.n_generated_tokens - 1;
            steady_span += trace.t_last_token - trace.t_first_token;
        }
    }
    let throughput = (steady_tokens > 0 && steady_span > 0.0).then(|| steady_tokens as f64 / steady_span);
    let tpot = throughput.map(|t| 1.0 / t);
    let n = traces.len().max(1) as u64;
    let kv_filled_bytes = traces.iter().map(|(_, t)| t.kv_filled_bytes).sum::<u64>() / n;
    let param_bytes = deployed.model.param_bytes;

    let achieved = tpot
        .map(|t| achieved_bandwidth(param_bytes as f64, kv_filled_bytes as f64, t))
        .transpose()?;
    let mbu = achieved
        .map(|a| metrics::mbu(a, device.peak_bandwidth))
        .transpose()?;
    let mean_ttft = ttft.iter().sum::<f64>() / ttft.len().max(1) as f64;
    let n_generated: usize = traces.iter().map(|(_, t)| t.n_generated_tokens).sum();

    let latency_ok = match (config.benchmark_params.latency_budget_seconds, tpot) {
        (Some(budget), Some(tpot)) => {
            let check = feasibility_check(
                &FeasibilityQuery {
                    spec: &deployed.model.spec,
                    param_bytes,
                    databyte: config.benchmark_params.kv_databyte,
                    batch: config.benchmark_params.batch,
                    seqlen: deployed.kv_capacity,
                    ttft: mean_ttft,
                    tpot,
                    n_out: config.benchmark_params.max_new_tokens,
                    latency_budget: Some(budget),
                },
                device,
            )?;
            Some(!check.failures.contains(&FeasibilityFailure::Latency))
        }
        _ => None,
    };

    Ok(MetricsReport {
        device: device.name.clone(),
        scheme,
        backend: deployed.backend,
        threads: deployed.threads,
        flops_by_threads,
        throughput,
        ttlm: deployed.t_load,
        ttft: mean_ttft,
        tpot,
        mbu,
        mbu_flag: mbu.filter(|&m| m > 1.0).map(|_| metrics::MBU_FLAG.to_string()),
        achieved_bandwidth: achieved,
        perplexity,
        latency_ok,
        param_bytes,
        kv_bytes: deployed.kv_bytes,
        kv_filled_bytes,
        flop_count: traces.iter().map(|(_, t)| t.flop_count).sum(),
        n_prompt_tokens: traces.iter().map(|(_, t)| t.n_prompt_tokens).sum(),
        n_generated_tokens: n_generated,
        generated: traces.iter().map(|(toks, _)| toks.clone()).collect(),
        status: RunStatus::Ok,
    })
}

fn median_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    median(&present)
}

/// Median row per (scheme, backend, threads) over the ok outcomes.
pub fn aggregate(outcomes: &[RunOutcome]) -> Vec<MetricsReport> {
    let mut groups: BTreeMap<(QuantScheme, BackendKind, usize), Vec<&MetricsReport>> = BTreeMap::new();
    for report in outcomes.iter().filter_map(RunOutcome::report) {
        groups
            .entry((report.scheme, report.backend, report.threads))
            .or_default()
            .push(report);
    }
    groups
        .into_values()
        .map(|rows| {
            let first = rows[0];
            let mut flops = BTreeMap::new();
            let threads: std::collections::BTreeSet<usize> =
                rows.iter().flat_map(|r| r.flops_by_threads.keys().copied()).collect();
            for t in threads {
                if let Some(m) = median_of(rows.iter().map(|r| r.flops_by_threads.get(&t).copied())) {
                    flops.insert(t, m);
                }
            }
            let mbu = median_of(rows.iter().map(|r| r.mbu));
            MetricsReport {
                flops_by_threads: flops,
                throughput: median_of(rows.iter().map(|r| r.throughput)),
                ttlm: median_of(rows.iter().map(|r| Some(r.ttlm))).unwrap_or(0.0),
                ttft: median_of(rows.iter().map(|r| Some(r.ttft))).unwrap_or(0.0),
                tpot: median_of(rows.iter().map(|r| r.tpot)),
                mbu,
                mbu_flag: mbu.filter(|&m| m > 1.0).map(|_| metrics::MBU_FLAG.to_string()),
                achieved_bandwidth: median_of(rows.iter().map(|r| r.achieved_bandwidth)),
                perplexity: median_of(rows.iter().map(|r| r.perplexity)),
                ..first.clone()
            }
        })
        .collect()
}
