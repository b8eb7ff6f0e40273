//! Dirichlet-process mixture of Gaussian-process regressions coupled with
//! Gaussian graphical models: data preparation, Markov chain Monte Carlo,
//! and posterior summaries.

pub mod config;
pub mod dp;
pub mod error;
pub mod ggm;
pub mod kernel;
pub mod linalg;
pub mod preprocess;
pub mod rng;
pub mod sampler;
pub mod simulate;
pub mod summary;

pub use error::{Error, Result};
