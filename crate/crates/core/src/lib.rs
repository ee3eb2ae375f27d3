pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod matcher;
pub mod networks;
pub mod nn;
pub mod pipeline;
pub mod stego;
pub mod training;
pub mod types;

pub use error::{Error, Result};
