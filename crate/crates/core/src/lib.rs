//! Markov renewal theory for semi-Markov kernels with quasi-stochastic weight
//! matrices.
//!
//! The crate computes Perron eigendata and harmonic transforms, gridded
//! matrix renewal measures, solutions of Markov renewal equations, Monte Carlo
//! estimates from simulated Markov random walks, and three worked
//! applications (random walk suprema, branching growth rates, perpetuity
//! tails).

pub mod apps;
pub mod error;
pub mod exec;
pub mod family;
pub mod grid;
pub mod kernel;
pub mod mre;
pub mod perron;
pub mod renewal;
pub mod report;
pub mod simulate;

pub use error::{Error, Result};
pub use exec::Exec;
