pub mod cli;
pub mod data;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod openworld;
pub mod protocol;

pub use error::{Error, Result};
