//! Multi-modality differentiable architecture search over paired 3D volumes.

pub mod autodiff;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod metrics;
pub mod nas_ops;
pub mod optim;
pub mod params;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use autodiff::{ConvGeom, PoolMode, Tape, Var};
pub use error::{Error, Result};
pub use optim::{Adam, Optimizer, Sgd};
pub use params::{Init, ParamSpec, ParamStore};
pub use tensor::Tensor;
