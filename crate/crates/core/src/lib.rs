pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocols;
pub mod rng;
pub mod stats;
pub mod sweep;
pub mod zapping;

pub use error::{Error, Result};
