//! Single-trial ERP decoding toolkit and closed-loop speller simulator.

pub mod baselines;
pub mod error;
pub mod metrics;
pub mod neural;
pub mod onlinesim;
pub mod rng;
pub mod sigproc;
pub mod synthgen;
pub mod tensorkit;

pub use error::{Error, ErrorCategory, Result};
