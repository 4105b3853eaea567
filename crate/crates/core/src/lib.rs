//! Benchmarking harness for block-quantized LLM inference on edge-class CPUs.
//!
//! The pipeline quantizes a model container into several block schemes, runs
//! each through a small LLaMA-style runtime with a pre-allocated KV cache, and
//! reports FLOPS, throughput, latency, perplexity and model bandwidth
//! utilization per configuration.

pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod report;
pub mod runtime;
pub mod tensor;
pub mod textio;

pub use error::{Error, Result};
