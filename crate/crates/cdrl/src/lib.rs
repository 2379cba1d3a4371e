//! Unsupervised change detection from single-temporal imagery.
//!
//! Training never sees a real bi-temporal pair: pseudo-unchanged pairs are
//! synthesized from single images by photometric transformation (parametric
//! and/or a learned style model), a pair-conditioned reconstructor is trained
//! adversarially to reproduce the source image, and at inference changed
//! regions surface as high reconstruction error.

pub mod dataset;
pub mod error;
pub mod grid;
pub mod io;
pub mod model;
pub mod nn;
pub mod checkpoint;
pub mod pseudopair;
pub mod style;
pub mod training;

pub use error::{CdrlError, Result};
