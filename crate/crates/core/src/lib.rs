pub mod diff;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod train;

pub use error::{GradError, Result};
