//! Score networks with hand-written backpropagation.

pub mod ops;
mod pointwise;
mod unet;

pub use pointwise::PointwiseMlp;
pub use unet::{tau_embedding, UNet, UNetConfig};

/// Location of one named parameter array inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
