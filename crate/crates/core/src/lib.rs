pub mod backend;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod prompting;
pub mod sampling;
pub mod synthlang;
pub mod transfer;
pub mod toymodel;

pub use error::{Error, ErrorCategory, Result};
