//! Post-training weight-only quantization of linear layers with a low-rank
//! feedback sub-branch.
//!
//! - [`quant`]: group-wise asymmetric round-to-nearest and bit packing.
//! - [`feedback`]: the feedback reconstruction `Q(W - Σ) + Σ`, its detached
//!   gradient and the per-layer optimizer, plus conventional baselines.
//! - [`illposed`]: null-space perturbations that fool conventional
//!   sub-branch objectives.
//! - [`runtime`]: naive and fused forward passes with byte-exact traffic
//!   counters, the MACs model and a benchmark harness.
//! - [`io`]: safetensors bundles, the FBQ1 container, reports and plots.
//! - [`cli`]: the `fbq` command-line tool.

pub mod cli;
pub mod error;
pub mod feedback;
pub mod gradcheck;
pub mod illposed;
pub mod io;
pub mod linalg;
pub mod quant;
pub mod runtime;
pub mod synth;

pub use error::{Error, Result};
