//! The Metropolis-within-Gibbs driver: fixed update order, proposal
//! adaptation window, periodic snapshots, and streaming saves.

use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ggm::{NormCache, NORM_CACHE_CAPACITY};
use crate::preprocess::ModelData;
use crate::rng::chain_rng;

use super::adapt::AdaptiveProposal;
use super::store::SampleStore;
use super::updates;
use super::{ChainState, ModelContext};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub n_iterations: usize,
    pub n_saved: usize,
    pub n_clusters_last: usize,
    pub accept_rate_beta_y: f64,
    pub accept_rate_beta_m: f64,
    pub accept_rate_kernel: f64,
    pub accept_rate_edges: f64,
    pub urn_moves: usize,
    pub final_log_likelihood: f64,
    pub norm_cache_hits: u64,
    pub norm_cache_misses: u64,
    pub files: Vec<PathBuf>,
}

fn flatten(m: &nalgebra::DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn kernel_log_vector(state: &ChainState) -> DVector<f64> {
    let n_proc = state.kernel.xi.len();
    let mut z = DVector::zeros(3 + n_proc);
    z[0] = state.kernel.sigma2.ln();
    z[1] = state.kernel.phi2.ln();
    z[2] = state.kernel.eta2.ln();
    for s in 0..n_proc {
        z[3 + s] = state.kernel.xi[s].ln();
    }
    z
}

fn write_snapshot(dir: &Path, name: &str, state: &ChainState) -> Result<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string(&state.snapshot_json())
        .map_err(|e| Error::parse("snapshot", e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Runs one chain and streams saved draws to `out_dir`.
///
/// `fixed_partition` freezes cluster assignments (the urn sweep is
/// skipped); labels must be contiguous with no empty cluster. Any
/// mid-chain failure dumps a state snapshot and reports the failing
/// iteration.
pub fn run_chain(
    data: &ModelData,
    config: &Config,
    out_dir: &Path,
    seed: u64,
    chain: u64,
    fixed_partition: Option<&[usize]>,
) -> Result<RunSummary> {
    let hyper = config.hyperparams(data.p_m())?;
    let ctx = ModelContext::new(data, hyper, &config.mcmc)?;
    let mut state = ChainState::init(&ctx, fixed_partition)?;
    let mut rng = chain_rng(seed, chain);
    let mcmc = &config.mcmc;

    let expected_saves = config.n_saved();
    let mut store = SampleStore::create(
        out_dir,
        data,
        expected_saves,
        fixed_partition.map(|_| state.atoms.len()),
    )?;

    let mut prop_beta_y = AdaptiveProposal::new(ctx.p_y() * ctx.q());
    let mut prop_beta_m = AdaptiveProposal::new(ctx.p_m() * ctx.q());
    let mut prop_kernel = AdaptiveProposal::new(3 + ctx.grid.n_processes);
    let mut cache = NormCache::with_capacity(NORM_CACHE_CAPACITY);

    let mut n_beta_y_acc = 0usize;
    let mut n_beta_m_acc = 0usize;
    let mut n_kernel_acc = 0usize;
    let mut n_edge_att = 0usize;
    let mut n_edge_acc = 0usize;
    let mut urn_moves = 0usize;
    let mut frozen_cov: Option<[nalgebra::DMatrix<f64>; 3]> = None;

    for it in 1..=mcmc.n_iter {
        state.iteration = it;
        let adapting = it >= mcmc.adapt_init;
        prop_beta_y.set_active(adapting);
        prop_beta_m.set_active(adapting);
        prop_kernel.set_active(adapting);
        if it == mcmc.n_burnin + 1 && frozen_cov.is_none() {
            prop_beta_y.freeze();
            prop_beta_m.freeze();
            prop_kernel.freeze();
            frozen_cov = Some([
                prop_beta_y.proposal_covariance(),
                prop_beta_m.proposal_covariance(),
                prop_kernel.proposal_covariance(),
            ]);
        }

        let step = (|| -> Result<()> {
            updates::impute_missing(&mut state, &ctx, &mut rng)?;
            if fixed_partition.is_none() {
                let stats = updates::urn_sweep(&mut state, &ctx, &mut rng)?;
                urn_moves += stats.n_moved;
            }
            updates::update_theta_star(&mut state, &ctx, &mut rng)?;
            let bd = updates::update_graphs(&mut state, &ctx, &mut cache, &mut rng)?;
            n_edge_att += bd.n_attempted;
            n_edge_acc += bd.n_accepted;
            if updates::update_beta_y(&mut state, &ctx, &mut prop_beta_y, &mut rng)? {
                n_beta_y_acc += 1;
            }
            if updates::update_beta_m(&mut state, &ctx, &mut prop_beta_m, &mut rng)? {
                n_beta_m_acc += 1;
            }
            updates::update_tau2(&mut state, &ctx, &mut rng)?;
            updates::update_mu_theta(&mut state, &ctx, &mut rng)?;
            if updates::update_kernel(&mut state, &ctx, &mut prop_kernel, &mut rng)? {
                n_kernel_acc += 1;
            }
            Ok(())
        })();
        if let Err(e) = step {
            let snap = write_snapshot(out_dir, "snapshot_error.json", &state)?;
            return Err(Error::Numerical(format!(
                "chain failed at iteration {it}: {e}; state snapshot at {}",
                snap.display()
            )));
        }

        if it <= mcmc.n_burnin {
            prop_beta_y.record(&flatten(&state.beta_y));
            prop_beta_m.record(&flatten(&state.beta_m));
            prop_kernel.record(&kernel_log_vector(&state));
        }

        if it > mcmc.n_burnin && (it - mcmc.n_burnin) % mcmc.thin == 0 {
            store.save(&state, &ctx)?;
        }
        if mcmc.snapshot_every > 0 && it % mcmc.snapshot_every == 0 {
            write_snapshot(out_dir, "snapshot.json", &state)?;
        }
    }

    if let Some(frozen) = &frozen_cov {
        // Diminishing-adaptation invariant: the proposal law must not have
        // moved since the end of burn-in.
        let now = [
            prop_beta_y.proposal_covariance(),
            prop_beta_m.proposal_covariance(),
            prop_kernel.proposal_covariance(),
        ];
        for (a, b) in frozen.iter().zip(now.iter()) {
            if a != b {
                return Err(Error::Numerical(
                    "proposal covariance changed after burn-in".to_string(),
                ));
            }
        }
    }

    let n_saved = store.n_saved();
    if n_saved != expected_saves {
        return Err(Error::Numerical(format!(
            "saved {n_saved} draws, expected {expected_saves}"
        )));
    }
    let files = store.finish(data, expected_saves)?;
    let final_log_likelihood = state.log_likelihood(&ctx);
    let n_iter = mcmc.n_iter.max(1) as f64;
    Ok(RunSummary {
        n_iterations: mcmc.n_iter,
        n_saved,
        n_clusters_last: state.atoms.len(),
        accept_rate_beta_y: n_beta_y_acc as f64 / n_iter,
        accept_rate_beta_m: n_beta_m_acc as f64 / n_iter,
        accept_rate_kernel: n_kernel_acc as f64 / n_iter,
        accept_rate_edges: if n_edge_att == 0 {
            0.0
        } else {
            n_edge_acc as f64 / n_edge_att as f64
        },
        urn_moves,
        final_log_likelihood,
        norm_cache_hits: cache.hits(),
        norm_cache_misses: cache.misses(),
        files,
    })
}
