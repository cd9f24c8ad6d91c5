//! Subject personalization and reward alignment for a small conditional
//! diffusion model on a synthetic glyph world.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod image;
pub mod personalization;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod toyworld;
pub mod vocab;

mod train;

pub use error::{Error, Result};
