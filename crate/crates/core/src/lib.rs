pub mod error;
pub mod experiment;
pub mod baselines;
pub mod data;
pub mod encoder;
pub mod mcqa;
pub mod numerics;
pub mod rng;
pub mod training;
pub mod tsaatt;
pub mod verify;

pub use error::{Error, Result};
