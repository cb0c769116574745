//! Open-vocabulary 3D semantic fields from inconsistent 2D supervision.
//!
//! The pipeline associates per-frame masks across views, learns a
//! contrastive prototype codebook over mask embeddings, distills per-pixel
//! prototype indices into the semantic channel of a set of 3D Gaussians,
//! and answers text queries against the rendered field.

pub mod bitmap;
pub mod ccl;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod field;
pub mod masks;
pub mod optim;
pub mod pipeline;
pub mod query;
pub mod splat;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
