//! Online sequential adaptation with sparsely generated fast weights.
//!
//! A network layer here carries two weight matrices: ordinary slow weights
//! trained by a gradient optimizer every `k` steps, and a fast-weight matrix
//! regenerated between gradient updates by a small coordinate-wise
//! meta-learner that reads the loss gradient. Each step only a Bernoulli-masked
//! subset of fast-weight coordinates is rewritten; the rest carry over, so the
//! fast weights accumulate a mixture of past sparse updates and act as a
//! memory at a timescale between activations and trained weights.
//!
//! The crate bundles:
//!
//! - [`autodiff`] — a minimal fp64 reverse-mode engine with truncation
//!   semantics suited to online training, plus SGD/Adam/RMSProp.
//! - [`fastweight`] — fast-weight layers, the gradient moving average, the
//!   coordinate-wise meta-learner, sparse masks, and the accumulation rule.
//! - [`trainer`] — the online loop alternating fast-weight updates with
//!   periodic joint slow/meta gradient updates under truncated BPTT, and the
//!   fast-weight-only evaluation mode.
//! - [`wcst`] — a Wisconsin Card Sorting Test environment with an A2C agent.
//! - [`stream`] — a non-stationary 5-way classification stream generator over
//!   a pluggable dataset backend, with adaptation metrics.
//! - [`baselines`] — plain-network training protocols for comparison.
//! - [`harness`] — experiment configs, presets, seeded runs, metric files,
//!   and CSV export.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `smnet` binary for the batch CLI.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
mod error;
pub mod fastweight;
pub mod harness;
pub mod stream;
pub mod trainer;
pub mod wcst;

pub use error::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;
