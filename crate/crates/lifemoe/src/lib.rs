//! Lifelong concept learning with gated low-rank experts over a miniature
//! conditional diffusion model.
//!
//! The crate trains a small pixel-space denoiser whose cross-attention K/V
//! projections are extended, task by task, with gated low-rank experts.
//! Routing distillation keeps the gate stable on old concepts, a threshold
//! rule prunes redundant experts layer by layer, and region-guided inference
//! composes multiple learned concepts in one image.

pub mod denoiser;
pub mod eval;
pub mod error;
pub mod graph;
pub mod moe;
pub mod numerics;
pub mod rng;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
