pub mod analysis;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod igia;
pub mod io;
pub mod merging;
pub mod model;
pub mod numerics;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
