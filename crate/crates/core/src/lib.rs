mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod seq2seq;
pub mod text;
pub mod train;

pub use error::{Error, Result};
