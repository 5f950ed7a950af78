pub mod attention;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod layers;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{FameError, Result};
