pub mod attribution;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod ledger;
pub mod linalg;
pub mod model;
pub mod steering;

pub use error::{Error, Result};
