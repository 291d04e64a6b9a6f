pub mod augment;
pub mod data;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
