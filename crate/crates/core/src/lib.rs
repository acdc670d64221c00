//! Desk-scale simulator and library for active multi-target tracking.
//!
//! A mobile robot with a limited field of view explores a 2-D occupancy
//! grid, detects moving targets, and maintains per-target Gaussian beliefs
//! by Kalman filtering. Action sequences come either from rule-based expert
//! planners (exploration, uncertainty-driven reacquisition, timed tracking)
//! or from an expert-conditioned denoising diffusion policy trained on
//! their demonstrations. A multi-head variational Bayesian last-layer
//! reward model predicts each expert's tracking reward and a lower
//! confidence bound rule performs pessimistic expert selection inside a
//! receding-horizon control loop.
//!
//! The crate is organized bottom-up: [`env`] (world), [`belief`]
//! (filtering and metrics), [`experts`] (rule-based planners),
//! [`features`] (observation encoding), [`nn`] (MLP + optimizer),
//! [`policy`] (diffusion), [`vbll`] (reward heads), [`bandit`]
//! (selection), [`controller`] (receding-horizon loop) and [`harness`]
//! (collection, training, evaluation, reporting).

pub mod bandit;
pub mod belief;
pub mod config;
pub mod controller;
pub mod env;
pub mod experts;
pub mod features;
pub mod harness;
pub mod io;
pub mod maps;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod vbll;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Version stamp embedded in serialized artifacts and reports.
pub const ARTIFACT_VERSION: &str = concat!("tracksim-", env!("CARGO_PKG_VERSION"));
