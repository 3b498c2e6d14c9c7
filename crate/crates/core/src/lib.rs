pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod model;
pub mod objective;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, TensorError, Var};
