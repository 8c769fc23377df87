pub mod bounds;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod estimation;
pub mod model;
pub mod optimizer;
pub mod sim;
pub mod system;

pub use error::{Error, ErrorKind, Result};
