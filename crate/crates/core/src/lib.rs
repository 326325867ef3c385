//! Stationary Nash equilibria of coupled multi-resource karma economies.

pub mod equilibrium;
pub mod error;
pub mod mdp;
pub mod mean_field;
pub mod model;
pub mod montecarlo;
pub mod scenario;
pub mod welfare;

pub use error::{Error, Result};
