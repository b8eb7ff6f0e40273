//! Metropolis-within-Gibbs sampler for the clustered trajectory +
//! precision-graph model.
//!
//! Subjects carry a longitudinal block Y_i (stacked process grids, noise
//! variance tau2 per process around a cluster-level trajectory plus fixed
//! covariate effects) and a metabolite block M_i (Gaussian with
//! cluster-level precision matrix constrained to a graph). Cluster
//! assignments follow a Dirichlet process; each cluster atom is a
//! trajectory vector together with a (graph, precision) pair.

pub mod adapt;
pub mod run;
pub mod store;
pub mod updates;

use nalgebra::{DMatrix, DVector};

use crate::config::{Hyperparams, LikelihoodMode, McmcConfig};
use crate::dp::{AtomModel, UrnConfig};
use crate::error::{Error, Result};
use crate::ggm::{
    gaussian_logdensity_precision, gwishart_sample, sample_graph_prior, BdConfig, Graph,
    PrecisionMatrix,
};
use crate::kernel::{build_kernel, CoordGrid, KernelMatrix, KernelParams};
use crate::linalg::LN_2PI;
use crate::preprocess::ModelData;
use crate::rng::Rng;

pub use adapt::{adaptive_mh_step, AdaptiveProposal};
pub use run::{run_chain, RunSummary};
pub use store::SampleStore;

/// Cluster-level parameters: one trajectory over the stacked grid plus one
/// graph-constrained precision matrix for the metabolite block.
#[derive(Debug, Clone)]
pub struct Atom {
    pub theta: DVector<f64>,
    pub graph: Graph,
    pub omega: PrecisionMatrix,
}

/// Immutable per-run inputs: data, hyperparameters, grid layout, and the
/// fixed pieces of the update configuration.
pub struct ModelContext<'a> {
    pub data: &'a ModelData,
    pub hyper: Hyperparams,
    pub grid: CoordGrid,
    /// Process index of each stacked coordinate.
    pub proc_of: Vec<usize>,
    pub bd: BdConfig,
    pub bd_steps: usize,
    pub urn: UrnConfig,
}

impl<'a> ModelContext<'a> {
    pub fn new(data: &'a ModelData, hyper: Hyperparams, mcmc: &McmcConfig) -> Result<Self> {
        let times: Vec<Vec<f64>> = data.processes.iter().map(|p| p.times.clone()).collect();
        let grid = CoordGrid::from_process_times(&times);
        let proc_of: Vec<usize> = grid.coords.iter().map(|&(s, _)| s).collect();
        if grid.dim() != data.p_y() {
            return Err(Error::InvalidArgument(format!(
                "process grids cover {} coordinates but Y has {}",
                grid.dim(),
                data.p_y()
            )));
        }
        let bd = BdConfig { n_mc: mcmc.n_mc_norm, refine_sweeps: mcmc.gwishart_refine_sweeps };
        let urn = UrnConfig { alpha: hyper.alpha, m_aux: mcmc.m_aux };
        let bd_steps = mcmc.bd_steps_per_cluster.unwrap_or_else(|| data.p_m().max(1));
        Ok(ModelContext { data, hyper, grid, proc_of, bd, bd_steps, urn })
    }

    pub fn n_subjects(&self) -> usize {
        self.data.n_subjects()
    }

    pub fn p_y(&self) -> usize {
        self.data.p_y()
    }

    pub fn p_m(&self) -> usize {
        self.data.p_m()
    }

    pub fn q(&self) -> usize {
        self.data.q()
    }

    pub fn likelihood_on(&self) -> bool {
        self.hyper.likelihood == LikelihoodMode::Full
    }
}

/// Everything the chain mutates. `y` and `m` hold the data with current
/// imputations written into the missing slots.
#[derive(Clone)]
pub struct ChainState {
    pub labels: Vec<usize>,
    pub atoms: Vec<Atom>,
    /// p_Y x q covariate effects on the longitudinal block.
    pub beta_y: DMatrix<f64>,
    /// p_M x q covariate effects on the metabolite block.
    pub beta_m: DMatrix<f64>,
    /// One noise variance per process.
    pub tau2: Vec<f64>,
    pub mu_theta: DVector<f64>,
    pub kernel: KernelParams,
    pub kernel_k: KernelMatrix,
    pub k_inv: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub iteration: usize,
}

impl ChainState {
    /// Deterministic starting point: one cluster (or the fixed partition),
    /// empty graphs with identity precisions, zero trajectories and
    /// coefficients, unit variances, missing entries at observed column
    /// means.
    pub fn init(ctx: &ModelContext, fixed_labels: Option<&[usize]>) -> Result<Self> {
        let n = ctx.n_subjects();
        let p_y = ctx.p_y();
        let p_m = ctx.p_m();
        let q = ctx.q();
        let labels: Vec<usize> = match fixed_labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "fixed partition has {} labels for {n} subjects",
                        l.len()
                    )));
                }
                crate::dp::Partition::from_labels(l.to_vec())?;
                l.to_vec()
            }
            None => vec![0; n],
        };
        let n_clusters = labels.iter().copied().max().map_or(1, |m| m + 1);
        let empty = Graph::empty(p_m);
        let mut atoms = Vec::with_capacity(n_clusters);
        for _ in 0..n_clusters {
            atoms.push(Atom {
                theta: DVector::zeros(p_y),
                graph: empty.clone(),
                omega: PrecisionMatrix::new(DMatrix::identity(p_m, p_m), &empty, "initial state")?,
            });
        }
        let kernel = KernelParams {
            sigma2: 1.0,
            phi2: 1.0,
            eta2: 1.0,
            xi: vec![1.0; ctx.grid.n_processes],
        };
        let kernel_k = build_kernel(&kernel, &ctx.grid)?;
        let k_inv = kernel_k.chol.inverse();
        let y = fill_missing_with_column_means(&ctx.data.y, &ctx.data.y_observed);
        let m = fill_missing_with_column_means(&ctx.data.m, &ctx.data.m_observed);
        Ok(ChainState {
            labels,
            atoms,
            beta_y: DMatrix::zeros(p_y, q),
            beta_m: DMatrix::zeros(p_m, q),
            tau2: vec![1.0; ctx.grid.n_processes],
            mu_theta: DVector::zeros(p_y),
            kernel,
            kernel_k,
            k_inv,
            y,
            m,
            iteration: 0,
        })
    }

    pub fn n_clusters(&self) -> usize {
        self.atoms.len()
    }

    /// Per-coordinate noise variance (tau2 of the owning process).
    pub fn tau2_coord(&self, ctx: &ModelContext) -> Vec<f64> {
        ctx.proc_of.iter().map(|&s| self.tau2[s]).collect()
    }

    /// Replaces the kernel parameters and the derived caches.
    pub fn set_kernel(&mut self, params: KernelParams, k: KernelMatrix) {
        self.kernel = params;
        self.k_inv = k.chol.inverse();
        self.kernel_k = k;
    }

    /// Full-data log likelihood at the current state (zero when the
    /// likelihood is disabled).
    pub fn log_likelihood(&self, ctx: &ModelContext) -> f64 {
        if !ctx.likelihood_on() {
            return 0.0;
        }
        let tau2c = self.tau2_coord(ctx);
        let mut total = 0.0;
        for i in 0..ctx.n_subjects() {
            let x_i = ctx.data.x.row(i).transpose();
            let atom = &self.atoms[self.labels[i]];
            total += subject_y_loglik(&self.y, i, &atom.theta, &(&self.beta_y * &x_i), &tau2c);
            if ctx.p_m() > 0 {
                let m_i = self.m.row(i).transpose();
                let mean_m = &self.beta_m * &x_i;
                total += gaussian_logdensity_precision(&m_i, &mean_m, &atom.omega);
            }
        }
        total
    }

    /// JSON snapshot of the full state (no RNG internals) for crash
    /// forensics and the periodic checkpoint.
    pub fn snapshot_json(&self) -> serde_json::Value {
        let atoms: Vec<serde_json::Value> = self
            .atoms
            .iter()
            .map(|a| {
                serde_json::json!({
                    "theta": a.theta.iter().copied().collect::<Vec<f64>>(),
                    "edges": a.graph.edges(),
                    "omega": matrix_rows(a.omega.matrix()),
                })
            })
            .collect();
        serde_json::json!({
            "iteration": self.iteration,
            "labels": self.labels,
            "atoms": atoms,
            "beta_y": matrix_rows(&self.beta_y),
            "beta_m": matrix_rows(&self.beta_m),
            "tau2": self.tau2,
            "mu_theta": self.mu_theta.iter().copied().collect::<Vec<f64>>(),
            "kernel": {
                "sigma2": self.kernel.sigma2,
                "phi2": self.kernel.phi2,
                "eta2": self.kernel.eta2,
                "xi": self.kernel.xi,
            },
        })
    }
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn fill_missing_with_column_means(data: &DMatrix<f64>, observed: &[Vec<bool>]) -> DMatrix<f64> {
    let mut out = data.clone();
    for j in 0..out.ncols() {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..out.nrows() {
            if observed[i][j] {
                sum += out[(i, j)];
                count += 1;
            }
        }
        let mean = if count > 0 { sum / count as f64 } else { 0.0 };
        for i in 0..out.nrows() {
            if !observed[i][j] {
                out[(i, j)] = mean;
            }
        }
    }
    out
}

/// Diagonal-Gaussian log likelihood of one subject's longitudinal row
/// around trajectory + covariate effect.
pub fn subject_y_loglik(
    y: &DMatrix<f64>,
    i: usize,
    theta: &DVector<f64>,
    bx: &DVector<f64>,
    tau2_coord: &[f64],
) -> f64 {
    let mut total = 0.0;
    for t in 0..y.ncols() {
        let r = y[(i, t)] - theta[t] - bx[t];
        total += -0.5 * (LN_2PI + tau2_coord[t].ln() + r * r / tau2_coord[t]);
    }
    total
}

/// The state as the urn sweep sees it: likelihood of one subject under a
/// candidate atom, and fresh atoms from the base measure.
pub struct UrnView<'a> {
    pub ctx: &'a ModelContext<'a>,
    pub y: &'a DMatrix<f64>,
    pub m: &'a DMatrix<f64>,
    pub beta_y: &'a DMatrix<f64>,
    pub beta_m: &'a DMatrix<f64>,
    pub tau2_coord: Vec<f64>,
    pub mu_theta: &'a DVector<f64>,
    pub kernel_k: &'a KernelMatrix,
}

impl<'a> AtomModel for UrnView<'a> {
    type Atom = Atom;

    fn n_subjects(&self) -> usize {
        self.ctx.n_subjects()
    }

    fn draw_atom(&self, rng: &mut Rng) -> Result<Atom> {
        let theta = self.kernel_k.sample(self.mu_theta, rng);
        let graph = sample_graph_prior(self.ctx.p_m(), self.ctx.hyper.edge_prior_d, rng)?;
        let omega = gwishart_sample(
            &self.ctx.hyper.gw_prior,
            &graph,
            self.ctx.bd.refine_sweeps,
            rng,
        )?;
        Ok(Atom { theta, graph, omega })
    }

    fn log_likelihood(&self, subject: usize, atom: &Atom) -> f64 {
        if !self.ctx.likelihood_on() {
            return 0.0;
        }
        let x_i = self.ctx.data.x.row(subject).transpose();
        let mut total =
            subject_y_loglik(self.y, subject, &atom.theta, &(self.beta_y * &x_i), &self.tau2_coord);
        if self.ctx.p_m() > 0 {
            let m_i = self.m.row(subject).transpose();
            let mean_m = self.beta_m * &x_i;
            total += gaussian_logdensity_precision(&m_i, &mean_m, &atom.omega);
        }
        total
    }
}
