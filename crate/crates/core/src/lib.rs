//! Joint uncertainty learning for conditional image generation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffcore`]: tensors, reverse-mode differentiation, gradient checking.
//! - [`adaat`]: per-channel affine feature warping.
//! - [`uncertainty`]: error maps, the uncertainty head, and the Laplacian loss.
//! - [`histmatch`]: differentiable histograms and histogram KL matching.
//! - [`lossstack`]: adversarial, perceptual and sync losses and their weighted total.
//! - [`synthdata`]: the procedural signal-driven inpainting dataset.
//! - [`trainer`]: model bundle, Adam, training loop, evaluation, checkpoints.
//! - [`config`]: the JSON run configuration.

pub mod adaat;
pub mod config;
pub mod diffcore;
mod error;
pub mod gradsuite;
pub mod histmatch;
pub mod imageio;
pub mod lossstack;
pub mod nn;
pub mod synthdata;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
