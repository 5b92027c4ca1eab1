//! Behavior foundation model: a causal transformer over
//! (day, slot, location, event) records that predicts the behavior label at
//! every position, trained with a class-robust objective.

pub mod adapt;
pub mod corpus;
mod error;
pub mod evalkit;
pub mod genseq;
pub mod net;
pub mod objective;
pub mod scalelab;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
