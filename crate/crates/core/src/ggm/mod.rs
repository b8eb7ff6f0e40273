//! Gaussian graphical model machinery: graphs with Bernoulli edge priors,
//! the G-Wishart distribution, and collapsed single-edge graph moves.

pub mod bd;
pub mod graph;
pub mod gwishart;

pub use bd::{bd_update, BdConfig, BdOutcome, NormCache, NORM_CACHE_CAPACITY};
pub use graph::{enumerate_graphs, graph_prior_logpmf, sample_graph_prior, Graph};
pub use gwishart::{
    gaussian_logdensity_precision, gwishart_logdensity, gwishart_lognorm_mc, gwishart_refresh,
    gwishart_sample, GWishartParams, LogNormEstimate, PrecisionMatrix,
};
