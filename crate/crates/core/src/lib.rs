//! Score-based generative downscaling of spatiotemporal fields.
//!
//! A diffusion prior is trained on short windows of fine-resolution
//! trajectories, composed into arbitrary-length trajectory scores, and
//! conditioned on coarse block-averaged, temporally subsampled observations.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod field;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod observation;
pub mod preprocess;
pub mod sampler;
pub mod sdat;
pub mod sequence;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use field::{Dims, Field, NormStats, Trajectory, VariableMask};
