pub mod error;
pub mod evaluation;
pub mod forecast;
pub mod gradient_suite;
pub mod grid;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
