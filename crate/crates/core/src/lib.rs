pub mod augment;
pub mod diagnostics;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod par;
pub mod rng;
pub mod sampling;
pub mod synth;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
