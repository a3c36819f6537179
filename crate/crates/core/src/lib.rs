pub mod attack;
pub mod cli;
pub mod data;
pub mod error;
pub mod flsim;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod prior;
pub mod tensor;

pub use error::{Error, Result};
