//! Concurrent object layers.
//!
//! Infers an occlusion-ordered stack of amodally completed RGBA layers from
//! a single composite image by running coupled per-layer diffusion
//! denoisers side by side, steered at inference time by a compositing loss
//! and a prior score-matching loss.

pub mod compositor;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod io;
pub mod scenegen;

pub use error::{Error, Result};
