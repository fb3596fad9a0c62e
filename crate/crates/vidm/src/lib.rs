//! Two-stream video diffusion at desk scale.
//!
//! A content denoiser generates the first frame of a clip; an autoregressive
//! motion denoiser generates every following frame, conditioned on a flow-like
//! latent between the first and the latest frame and modulated by positional
//! group normalization over (h, w, n, t) coordinates. Everything runs on CPU
//! with deterministic, seedable numerics.
//!
//! Module map:
//! - [`diffusion`]: noise schedules, forward noising, reverse step, losses
//! - [`nn`]: hand-rolled layers with explicit forward/backward passes
//! - [`nets`]: the content/motion denoisers, latent encoder, residual encoder
//! - [`training`]: optimization loops for both streams
//! - [`sampling`]: content sampling and autoregressive video generation
//! - [`data`]: synthetic bouncing-shapes videos and the on-disk format
//! - [`eval`]: Fréchet-distance video metric proxy and frame diagnostics
//! - [`config`] / [`checkpoint`] / [`cli`]: operator surface

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod nets;
pub mod nn;
pub mod num;
pub mod rng;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
pub use num::Real;
pub use rng::Rng;
