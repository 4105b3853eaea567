//! Benchmark configuration: a flat `key = value` text format with
//! `[benchmark_params]` and `[device_params]` sections.
//!
//! ```text
//! original_model = models/tiny.elib
//! quantization_params = q4_0, q8_0
//! prompt_data = prompts.txt
//! corpus = wiki.txt
//!
//! [benchmark_params]
//! iteration = 3
//! max_new_tokens = 32
//!
//! [device_params]
//! profile = macbook_m2
//! thread_counts = 4, 8
//! backend = threaded
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! `#` starts a comment at the beginning of a line or after whitespace.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DeviceProfile;
use crate::quant::QuantScheme;
use crate::runtime::{BackendKind, GenerationParams};
use crate::textio::EOS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub iteration: usize,
    pub batch: usize,
    pub max_new_tokens: usize,
    pub top_k: usize,
    pub top_p: f32,
    pub repeat_last_n: usize,
    pub repeat_penalty: f32,
    pub temperature: f32,
    pub seed: u64,
    pub context_len: usize,
    pub stride: usize,
    pub timeout_seconds: f64,
    /// Extra silence beyond `timeout_seconds` before a run counts as stalled.
    pub stall_grace_seconds: f64,
    pub memory_limit_bytes: Option<u64>,
    pub kv_databyte: usize,
    pub flops_dim: usize,
    pub flops_repetitions: usize,
    pub latency_budget_seconds: Option<f64>,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            iteration: 3,
            batch: 1,
            max_new_tokens: 32,
            top_k: 40,
            top_p: 0.95,
            repeat_last_n: 64,
            repeat_penalty: 1.1,
            temperature: 0.0,
            seed: 42,
            context_len: 128,
            stride: 128,
            timeout_seconds: 300.0,
            stall_grace_seconds: 1.0,
            memory_limit_bytes: None,
            kv_databyte: 4,
            flops_dim: 128,
            flops_repetitions: 3,
            latency_budget_seconds: None,
        }
    }
}

impl BenchmarkParams {
    pub fn generation(&self) -> GenerationParams {
        GenerationParams {
            max_new_tokens: self.max_new_tokens,
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
            repeat_last_n: self.repeat_last_n,
            repeat_penalty: self.repeat_penalty,
            seed: self.seed,
            eos_token: Some(EOS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    /// Preset name; ignored when `inline` is set.
    pub profile: Option<String>,
    pub inline: Option<DeviceProfile>,
    pub thread_counts: Option<Vec<usize>>,
    pub backend: BackendKind,
}

impl Default for DeviceParams {
    fn default() -> Self {
        DeviceParams {
            profile: None,
            inline: None,
            thread_counts: None,
            backend: BackendKind::Threaded,
        }
    }
}

pub const DEFAULT_DEVICE: &str = "macbook_m2";

impl DeviceParams {
    /// Resolved device profile with the configured thread sweep applied.
    pub fn device(&self) -> Result<DeviceProfile> {
        let mut device = match (&self.inline, &self.profile) {
            (Some(d), _) => d.clone(),
            (None, Some(name)) => DeviceProfile::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "device_params.profile: unknown preset `{name}` (known: {})",
                    DeviceProfile::preset_names().join(", ")
                ))
            })?,
            (None, None) => DeviceProfile::preset(DEFAULT_DEVICE).expect("default preset exists"),
        };
        if let Some(threads) = &self.thread_counts {
            device.thread_counts = threads.clone();
        }
        device.validate()?;
        Ok(device)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub original_model: PathBuf,
    pub quantization_params: Vec<QuantScheme>,
    pub prompt_data: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub benchmark_params: BenchmarkParams,
    pub device_params: DeviceParams,
}

impl BenchConfig {
    pub fn new(original_model: impl Into<PathBuf>, schemes: Vec<QuantScheme>) -> Self {
        BenchConfig {
            original_model: original_model.into(),
            quantization_params: schemes,
            prompt_data: None,
            corpus: None,
            benchmark_params: BenchmarkParams::default(),
            device_params: DeviceParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.benchmark_params;
        let positive = [
            ("iteration", b.iteration),
            ("batch", b.batch),
            ("max_new_tokens", b.max_new_tokens),
            ("stride", b.stride),
            ("flops_dim", b.flops_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("benchmark_params.{name} must be at least 1")));
        }
        if b.context_len < 2 {
            return Err(Error::Config("benchmark_params.context_len must be at least 2".into()));
        }
        if b.stride > b.context_len {
            return Err(Error::Config(
                "benchmark_params.stride must not exceed context_len".into(),
            ));
        }
        if !(b.timeout_seconds > 0.0) || !(b.stall_grace_seconds >= 0.0) {
            return Err(Error::Config("benchmark_params: timeouts must be positive".into()));
        }
        if b.kv_databyte != 2 && b.kv_databyte != 4 {
            return Err(Error::Config("benchmark_params.kv_databyte must be 2 or 4".into()));
        }
        if b.flops_dim < 64 || b.flops_repetitions < 3 {
            return Err(Error::Config(
                "benchmark_params: flops_dim must be >= 64 and flops_repetitions >= 3".into(),
            ));
        }
        b.generation()
            .validate(usize::MAX)
            .map_err(|e| Error::Config(format!("benchmark_params: {e}")))?;
        self.device_params.device()?;
        Ok(())
    }
}

struct Line<'a> {
    number: usize,
    key: &'a str,
    value: &'a str,
}

impl Line<'_> {
    fn err(&self, section: &str, msg: impl std::fmt::Display) -> Error {
        let key = if section.is_empty() {
            self.key.to_string()
        } else {
            format!("{section}.{}", self.key)
        };
        Error::Config(format!("line {}: {key}: {msg}", self.number))
    }

    fn parse<T: FromStr>(&self, section: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse::<T>()
            .map_err(|e| self.err(section, format!("invalid value `{}` ({e})", self.value)))
    }

    fn list<T: FromStr>(&self, section: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<T>()
                    .map_err(|e| self.err(section, format!("invalid list item `{s}` ({e})")))
            })
            .collect()
    }

    /// Integer that may be written as `1e9`, `16_000_000`, ...
    fn bytes(&self, section: &str) -> Result<u64> {
        let cleaned = self.value.replace('_', "");
        if let Ok(v) = cleaned.parse::<u64>() {
            return Ok(v);
        }
        match cleaned.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < u64::MAX as f64 => Ok(v as u64),
            _ => Err(self.err(section, format!("invalid byte count `{}`", self.value))),
        }
    }
}

/// Parses a config file; relative paths resolve against its directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<BenchConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_config_str(&text, base)
}

pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<BenchConfig> {
    let resolve = |p: &str| {
        let p = PathBuf::from(p);
        if p.is_absolute() {
            p
        } else {
            base_dir.join(p)
        }
    };

    let mut original_model = None;
    let mut schemes = None;
    let mut prompt_data = None;
    let mut corpus = None;
    let mut bench = BenchmarkParams::default();
    let mut stride_set = false;
    let mut device = DeviceParams::default();
    let (mut dev_name, mut dev_peak, mut dev_ram) = (None, None, None);

    let mut section = String::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let number = idx + 1;
        // `#` opens a comment at line start or after whitespace
        let line = match raw.find(" #").or_else(|| raw.find("\t#")) {
            Some(at) => &raw[..at],
            None => raw,
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let name = name.trim();
            if name != "benchmark_params" && name != "device_params" {
                return Err(Error::Config(format!("line {number}: unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Config(format!(
                "line {number}: expected `key = value`, got `{trimmed}`"
            )));
        };
        let line = Line {
            number,
            key: key.trim(),
            value: value.trim(),
        };
        if !seen.insert((section.clone(), line.key.to_string())) {
            return Err(line.err(&section, "duplicate key"));
        }
        let s = section.as_str();
        match (s, line.key) {
            ("", "original_model") => original_model = Some(resolve(line.value)),
            ("", "quantization_params") => schemes = Some(line.list::<QuantScheme>(s)?),
            ("", "prompt_data") => prompt_data = Some(resolve(line.value)),
            ("", "corpus") => corpus = Some(resolve(line.value)),

            ("benchmark_params", "iteration") => bench.iteration = line.parse(s)?,
            ("benchmark_params", "batch") => bench.batch = line.parse(s)?,
            ("benchmark_params", "max_new_tokens") => bench.max_new_tokens = line.parse(s)?,
            ("benchmark_params", "top_k") => bench.top_k = line.parse(s)?,
            ("benchmark_params", "top_p") => bench.top_p = line.parse(s)?,
            ("benchmark_params", "repeat_last_n") => bench.repeat_last_n = line.parse(s)?,
            ("benchmark_params", "repeat_penalty") => bench.repeat_penalty = line.parse(s)?,
            ("benchmark_params", "temperature") => bench.temperature = line.parse(s)?,
            ("benchmark_params", "seed") => bench.seed = line.parse(s)?,
            ("benchmark_params", "context_len") => bench.context_len = line.parse(s)?,
            ("benchmark_params", "stride") => {
                bench.stride = line.parse(s)?;
                stride_set = true;
            }
            ("benchmark_params", "timeout_seconds") => bench.timeout_seconds = line.parse(s)?,
            ("benchmark_params", "stall_grace_seconds") => {
                bench.stall_grace_seconds = line.parse(s)?
            }
            ("benchmark_params", "memory_limit_bytes") => {
                bench.memory_limit_bytes = Some(line.bytes(s)?)
            }
            ("benchmark_params", "kv_databyte") => bench.kv_databyte = line.parse(s)?,
            ("benchmark_params", "flops_dim") => bench.flops_dim = line.parse(s)?,
            ("benchmark_params", "flops_repetitions") => bench.flops_repetitions = line.parse(s)?,
            ("benchmark_params", "latency_budget_seconds") => {
                bench.latency_budget_seconds = Some(line.parse(s)?)
            }

            ("device_params", "profile") => device.profile = Some(line.value.to_string()),
            ("device_params", "name") => dev_name = Some(line.value.to_string()),
            ("device_params", "peak_bandwidth") => dev_peak = Some(line.parse::<f64>(s)?),
            ("device_params", "ram_bytes") => dev_ram = Some(line.bytes(s)?),
            ("device_params", "thread_counts") => device.thread_counts = Some(line.list(s)?),
            ("device_params", "backend") => device.backend = line.parse(s)?,

            _ => return Err(line.err(s, "unknown key")),
        }
    }

    if !stride_set {
        bench.stride = bench.context_len;
    }
    match (dev_name, dev_peak, dev_ram) {
        (None, None, None) => {}
        (name, Some(peak), Some(ram)) => {
            device.inline = Some(DeviceProfile {
                name: name.unwrap_or_else(|| "host".to_string()),
                peak_bandwidth: peak,
                ram_bytes: ram,
                thread_counts: vec![4, 8],
            });
        }
        _ => {
            return Err(Error::Config(
                "device_params: an inline device needs both peak_bandwidth and ram_bytes".into(),
            ))
        }
    }

    let config = BenchConfig {
        original_model: original_model
            .ok_or_else(|| Error::Config("missing required field `original_model`".into()))?,
        quantization_params: schemes.unwrap_or_default(),
        prompt_data,
        corpus,
        benchmark_params: bench,
        device_params: device,
    };
    config.validate()?;
    Ok(config)
}
