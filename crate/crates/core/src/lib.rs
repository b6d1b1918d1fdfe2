//! Continual deepart detection on a synthetic, spectrally fingerprinted image
//! stream.

pub mod backbone;
pub mod engine;
pub mod error;
pub mod harness;
pub mod heads;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod protocol;
pub mod spectra;
pub mod synth;

pub use error::{Error, Result};
