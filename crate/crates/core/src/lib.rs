//! Batch engine for reconstructing and nowcasting a stratified epidemic.
//!
//! The engine fits a deterministic, discrete-time compartmental transmission
//! model (dose-stratified SE²I²R⁺R⁻WWˢ) to several surveillance streams
//! (severe-event counts, serology, externally produced prevalence estimates)
//! via an adaptive block Metropolis sampler, and post-processes posterior
//! samples into reproduction-number decompositions, severity trajectories,
//! attack rates and counterfactual vaccination impacts.

pub mod analysis;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod inference;
pub mod observation;
pub mod outputs;
pub mod params;
pub mod priors;
pub mod repro;
pub mod severity;
pub mod strata;
pub mod synthetic;

pub use config::RunConfig;
pub use strata::{StateTensor, StratumSpec};

/// Errors produced by the modelling and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data in {file}: {message}")]
    Data { file: String, message: String },
    #[error("state validation failed: {0}")]
    State(String),
    #[error("simulation failed: {0}")]
    Simulation(String),
    #[error("numerical routine failed: {0}")]
    Numerics(String),
    #[error("date {0} outside the analysis horizon")]
    OutOfHorizon(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
