pub mod body_model;
pub mod dmaps;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod losses_metrics;
pub mod modar;
pub mod numerics;
pub mod pipeline;
pub mod rotation;
pub mod synth;

pub use error::{Error, Result};
