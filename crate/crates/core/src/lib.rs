pub mod encoder;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod text;

pub use error::{Error, ErrorKind, Result};
