use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("state space has {states} states per type, budget is {budget}")]
    CapacityOverflow { states: usize, budget: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("benchmark not Pareto-dominated for type {type_name}: gain {gain}")]
    NotDominated { type_name: String, gain: f64 },

    #[error("exogenous average payoff undefined for type {0}: no active mass")]
    NoActiveMass(String),

    #[error("policy places mass on infeasible bid {bid} in state {state}")]
    InfeasibleBid { state: usize, bid: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
