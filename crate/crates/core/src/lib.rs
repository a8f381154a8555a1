pub mod checks;
pub mod cli;
pub mod correspondence;
pub mod entropy;
pub mod error;
pub mod kernel;
pub mod maps;
pub mod operator;
pub mod orbits;

pub use error::{Error, Result};
