pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod par;
pub mod rng;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
