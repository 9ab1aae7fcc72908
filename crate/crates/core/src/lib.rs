//! Blind bitstream-corrupted video recovery at desk scale.
//!
//! Corrupted video decoded from a damaged bitstream carries structured
//! artifacts (color stripes, shifted blocks, stale propagated content)
//! confined to macroblock-aligned regions. This crate provides the full
//! two-stage stack for recovering such video without manual masks:
//!
//! * [`videodata`] — sequence types, a seeded corruption simulator with
//!   ground-truth masks, and dataset I/O.
//! * [`sideinfo`] — motion-vector maps and prediction-mode embeddings
//!   rendered from codec-emitted sidecar files.
//! * [`encoders`] — pluggable multi-scale / token / global encoders with
//!   small trainable reference implementations.
//! * [`dac`] — the corruption detector: cross-domain prompting neck,
//!   mask decoder, detection losses and metrics.
//! * [`cfc`] — corruption-aware feature completion: mask-gated scale-wise
//!   cross-attention, a mixture of residual experts with a soft voting
//!   gate, channel re-weighting, and a reference recovery head.
//! * [`metrics`] — PSNR/SSIM quality metrics with masked-region variants.
//! * [`pipeline`] — configuration, two-stage training drivers, evaluation
//!   harness, and checkpoint lifecycle.
//!
//! All numerics run in `f64` on a small tape-based autodiff engine
//! ([`tensor`]); every seeded operation is bit-identical across runs.

pub mod cfc;
pub mod dac;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod sideinfo;
pub mod tensor;
pub mod videodata;

pub use error::{Error, Result};
pub use videodata::{ClipSample, CorruptionSpec, MaskSequence, VideoSequence};
