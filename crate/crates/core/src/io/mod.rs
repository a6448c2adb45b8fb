//! Persistence: the tensor container, checkpoints and run configuration.

pub mod checkpoint;
pub mod config;
pub mod container;

pub use checkpoint::{load_igia, load_model, save_igia, save_model};
pub use config::{RunConfig, SEED_ENV};
pub use container::{decode_container, encode_container, load_container, save_container, Container, DType};
