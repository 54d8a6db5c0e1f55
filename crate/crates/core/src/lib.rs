//! Desk-scale generative diffusion pipeline for retinal vessel maps and
//! fundus images: tensor numerics with reverse-mode autodiff, DDPM noise
//! schedules and ancestral sampling, a UNet+ViT denoiser with locality
//! self-attention, super-resolution and segmentation networks, the full
//! evaluation-metric suite, and a procedural dataset synthesizer that makes
//! everything trainable on CPU.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod numerics;
pub mod rng;
pub mod schedules;
pub mod training;

pub use error::{Error, ErrorCategory, Result};
