pub mod ams;
pub mod bundle;
pub mod config;
pub mod error;
pub mod evalharness;
pub mod inversion;
pub mod memory;
pub mod metalearn;
pub mod modelpool;
pub mod nn;
pub mod orchestrator;
pub mod pipeline;
pub mod selftest;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
