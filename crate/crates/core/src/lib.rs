//! Engine for binary event-driven spiking transformers.

pub mod binary;
pub mod data;
pub mod error;
pub mod learn;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod numeric;
pub mod param;
pub mod probe;

pub use error::{Error, Result};
