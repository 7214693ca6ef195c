//! Desk-scale simulator and policy library for batch-shape-induced token
//! nondeterminism in greedy low-precision decoding.
//!
//! The crate builds a small decoder-only transformer whose arithmetic runs
//! through emulated BF16 storage with batch-size-dependent reduction
//! schedules. Identical requests decoded at different batch sizes can then
//! flip tokens, and the library provides the machinery around that effect:
//!
//! * [`numerics`]: BF16 rounding, chunked reductions, perturbation modes.
//! * [`model`]: seeded toy transformer weights and the single-position
//!   forward pass.
//! * [`kvcache`]: per-layer key/value cache with single-column overwrite.
//! * [`engines`]: batched decode, batch-invariant reference decode, and the
//!   prefix verifier.
//! * [`diagnostics`]: divergence detection, cache-deviation profiles, logit
//!   geometry at flip points.
//! * [`policy`]: the oracle single-column repair and the margin-gated
//!   selective verifier.
//! * [`calibration`]: perturbation measurement, threshold sweeps, transfer
//!   checks.
//! * [`pipeline`]: end-to-end experiment commands over a corpus, producing
//!   CSV tables and JSON manifests.

pub mod calibration;
pub mod config;
pub mod corpus;
pub mod diagnostics;
pub mod engines;
pub mod error;
pub mod kvcache;
pub mod manifest;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
