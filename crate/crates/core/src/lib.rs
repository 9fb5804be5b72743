//! Infrared and visible image fusion with a multi-scale convolutional fusion
//! network trained against a frozen windowed-attention feature extractor.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two concrete precisions.

pub mod autograd;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod gfem;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod msfm;
pub mod optim;
pub mod params;
pub mod saliency;
pub mod scalar;
pub mod synthetic;
pub mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = dataio::NormalizedImage<f32>;
pub type Image64 = dataio::NormalizedImage<f64>;
pub type MsfmWeights32 = msfm::MsfmWeights<f32>;
pub type MsfmWeights64 = msfm::MsfmWeights<f64>;
pub type GfemWeights32 = gfem::GfemWeights<f32>;
pub type GfemWeights64 = gfem::GfemWeights<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
