//! Diffusion-based video inpainting.
//!
//! A dual-branch denoiser (main UNet plus a masked-image conditioning branch
//! fused through zero-initialized projections, with temporal attention after
//! spatial self- and cross-attention), prior injection through DDIM
//! inversion, and staggered clip scheduling for long videos.

pub mod checkpoint;
pub mod cli;
pub mod codec;
pub mod error;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod scheduler;
pub mod planner;
pub mod prior;
pub mod train;
pub mod video;

pub use error::{Error, Result};
