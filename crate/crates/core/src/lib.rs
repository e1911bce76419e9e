pub mod blocked;
pub mod direct;
pub mod emission;
pub mod error;
pub mod eval;
pub mod geweke;
pub mod hyper;
pub mod model;
pub mod obs;
pub mod pipeline;
pub mod prob;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use rng::RngState;
