pub mod attacks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod norm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
