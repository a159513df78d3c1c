//! Semi-supervised training with pseudo-labels held as trainable logits and
//! optimised jointly with the network, plus numerical checks of the resulting
//! stationarity conditions.

pub mod ablation;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod pseudo_labels;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
