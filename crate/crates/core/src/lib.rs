//! Trajectory, text and reference conditioned toy video generation.
//!
//! The crate covers the multimodal triplet format, a procedural training
//! data generator, condition encoding, spatially weighted cross-attention,
//! a small diffusion transformer trained with flow matching, and the
//! evaluation metrics built on a colour-centroid tracker.

mod error;

pub mod attention;
pub mod eval;
pub mod condition;
pub mod model;
pub mod nn;
pub mod synthgen;
pub mod text;
pub mod train;
pub mod triplet;

pub use error::{Error, Result};
