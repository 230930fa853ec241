pub mod calib;
pub mod cli;
pub mod distill;
pub mod error;
pub mod io;
pub mod model;
pub mod params;
pub mod quant;
pub mod rotation;
pub mod tensor;

pub use error::{Result, SilqError};
