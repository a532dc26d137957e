//! Citywide accident-risk forecasting on a two-level urban grid.
//!
//! The pipeline ingests interval-binned traffic and accident data, repairs
//! missing speed/volume readings with a factorization-machine co-sensor,
//! learns time-varying subregion affinities, and trains a differential
//! time-varying graph network with multi-task heads that jointly predict
//! subregion risk, traffic volume, and coarse-region accident counts.

pub mod affinity;
pub mod error;
pub mod exec;
pub mod grid;
pub mod tensor;

pub use error::{Error, Result};
