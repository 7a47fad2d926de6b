//! A desk-scale, deterministic transformer inference engine with explicit
//! two-tier memory accounting.
//!
//! The engine exists to make prefill memory behaviour *measurable and
//! checkable*: every tensor is charged to a budget-enforced device pool or
//! to the host pool, the KV cache can be offloaded between them with exact
//! byte ledgers, and three prefill strategies — full-sequence, mini-sequence
//! MLP partitioning, and chunked prefill — produce bitwise-identical logits
//! while exercising very different peak-memory profiles. A closed-form
//! memory model predicts the peaks and the maximum context length, and the
//! harness validates prediction against measurement.
//!
//! Modules:
//!
//! - [`memtrack`]: device/host pools, budgets, transfer ledger, snapshots
//! - [`tensor`]: deterministic dense kernels charged against the pools
//! - [`model`]: Llama-style decoder with GQA, RoPE, SwiGLU, KV cache
//! - [`strategies`]: the three prefill paths, offload/reload, greedy decode
//! - [`analytics`]: the closed-form memory model and FLOP accounting
//! - [`runner`]: experiment runner, sweeps, max-context search, equivalence
//! - [`report`]: run reports, JSON/CSV emission, logits checksums
//! - [`config`]: flat JSON run configuration

pub mod analytics;
pub mod config;
pub mod context;
pub mod memtrack;
pub mod model;
pub mod report;
pub mod runner;
pub mod strategies;
pub mod tensor;

pub use analytics::{analytic_memory_model, predict_max_context, AnalyticalInputs, MemoryBreakdown};
pub use context::{FlopBreakdown, RunCtx, Stage};
pub use memtrack::{BudgetExceeded, MemSnapshot, MemoryPool, Tier, TransferLedger};
pub use model::{KvCache, Model, ModelConfig, Weights};
pub use report::RunReport;
pub use strategies::{PrefillResult, StrategyConfig, StrategyKind};
pub use tensor::Tensor;
