//! Bayesian optimization with preference exploration.

pub mod acquisition;
pub mod config;
pub mod error;
pub mod gp;
pub mod kernel;
pub mod linalg;
pub mod optim;
pub mod paths;
pub mod pref;
pub mod problems;
pub mod qmc;
pub mod qnei;
pub mod runner;
pub mod session;
pub mod stats;

pub use error::{BopeError, Result};
