//! Synthetic scenes with controlled cross-view inconsistency.

mod corruption;
mod scene;

pub use corruption::*;
pub use scene::*;
