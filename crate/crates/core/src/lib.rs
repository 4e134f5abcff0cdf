pub mod attention;
pub mod cli;
pub mod data;
pub mod elastic;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
