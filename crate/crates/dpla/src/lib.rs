//! Dual-stage post-hoc logit adjustment (DPLA) for open-world long-tailed
//! semi-supervised learning at desk scale.
//!
//! The crate covers the full experimental pipeline: long-tailed dataset
//! construction with known and novel classes under consistent/uniform/
//! reversed regimes, a small MLP with hand-derived gradients, the two
//! adjustment stages (class-frequency logit offsets and estimated-ratio
//! logit scaling), pseudo-label refinement and confidence masking, the
//! composite training objective, and Hungarian-matched known/novel/all
//! evaluation.

pub mod adjust;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
