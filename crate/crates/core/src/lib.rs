pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod scenario;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
