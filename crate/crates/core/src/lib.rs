pub mod autodiff;
pub mod baselines;
pub mod codec;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod gaussian;
pub mod layer;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod params;
pub mod priors;
pub mod rng;
pub mod trainer;

pub use error::{BnnpError, Result};
