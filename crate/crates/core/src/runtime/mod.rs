//! Model-Graph-Kernel inference runtime.
//!
//! * model layer: [`graph::Model`] holds the immutable weights,
//! * graph layer: [`graph::forward`] with the pre-allocated [`kv::KvCache`],
//! * kernel layer: [`kernels::ExecCtx`] with naive and threaded kernels.

pub mod generate;
pub mod graph;
pub mod kernels;
pub mod kv;
pub mod sample;

pub use generate::{generate, InferenceTrace, TokenObserver};
pub use graph::{decode_step, forward, load_model, prefill, LogitRows, Model};
pub use kernels::{BackendKind, ExecCtx, Matrix};
pub use kv::{allocate_kv_cache, KvCache};
pub use sample::{sample, GenerationParams};
