pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dynconv;
pub mod model;
pub mod features;
pub mod ssl;
pub mod error;
pub mod eval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
