//! Mixture Poisson log-normal network estimation.

pub mod admm;
pub mod assign;
pub mod engine;
pub mod eval;
pub mod error;
pub mod glasso;
pub mod io;
pub mod kmeans;
pub mod linalg;
pub mod pln;
pub mod rng;
pub mod simgen;
pub mod variational;

pub use error::{Error, Result};
