pub mod baselines;
pub mod bench;
pub mod cluster;
pub mod dgm;
pub mod error;
pub mod model;
pub mod regression;
pub mod sampler;
pub mod scalar;

pub use error::{Error, Result};

/// Double-precision dataset, the type every fitter consumes.
pub type Dataset64 = model::Dataset<f64>;
pub type Dataset32 = model::Dataset<f32>;
pub type ClusteredCox64 = model::ClusteredCox<f64>;
pub type ClusteredCox32 = model::ClusteredCox<f32>;
