//! Long-term multivariate time series forecasting with compressed 3D
//! tensor representations, trained end to end with an internal
//! representation-prediction objective.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod jepa;
pub mod model;
pub mod nn;
pub mod optim;
pub mod revin;
pub mod tensor;
pub mod train;

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run(std::env::args_os())
}
