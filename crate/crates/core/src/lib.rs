//! System identification with neural ODEs regularized by reference
//! Jacobians extracted from measured transients, and small-signal
//! stability analysis of the learned models.

pub mod error;
pub mod integrate;
pub mod jacest;
pub mod neuralfield;
pub mod plants;
pub mod signals;
pub mod stability;
pub mod training;

pub use error::{Error, Result};
