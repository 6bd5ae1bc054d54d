pub mod error;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
pub mod scene;
pub mod prps;
pub mod hrpe;
pub mod infer;
pub mod eval;
pub mod pipeline;
