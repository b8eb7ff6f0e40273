//! Full-conditional and Metropolis updates for each parameter block.
//!
//! With the likelihood disabled every update targets the corresponding
//! prior (the trajectory/graph hierarchy is kept, data terms are dropped
//! and imputation is skipped), which is what lets a prior-only chain be
//! checked against the known marginals.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Gamma};
use statrs::function::gamma::ln_gamma;

use crate::config::{GammaPrior, InvGammaPrior};
use crate::dp::{polya_urn_sweep, UrnStats};
use crate::error::{Error, Result};
use crate::ggm::{bd_update, gaussian_logdensity_precision, BdOutcome, NormCache};
use crate::kernel::{build_kernel, KernelParams};
use crate::linalg::{symmetrize, CholFactor};
use crate::rng::Rng;

use super::adapt::{adaptive_mh_step, AdaptiveProposal};
use super::{subject_y_loglik, ChainState, ModelContext, UrnView};

/// Inverse-gamma draw (shape/rate convention: mean rate/(shape-1)).
pub fn inv_gamma_draw(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0).map_err(|e| {
        Error::InvalidArgument(format!("inverse-gamma shape {shape} invalid: {e}"))
    })?;
    let g: f64 = gamma.sample(rng);
    Ok(rate / g.max(f64::MIN_POSITIVE))
}

pub fn gamma_draw(shape: f64, rate: f64, rng: &mut Rng) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0 / rate).map_err(|e| {
        Error::InvalidArgument(format!("gamma({shape}, {rate}) invalid: {e}"))
    })?;
    Ok(gamma.sample(rng))
}

pub fn inv_gamma_logpdf(x: f64, prior: InvGammaPrior) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    prior.shape * prior.rate.ln() - ln_gamma(prior.shape) - (prior.shape + 1.0) * x.ln()
        - prior.rate / x
}

pub fn gamma_logpdf(x: f64, prior: GammaPrior) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    prior.shape * prior.rate.ln() - ln_gamma(prior.shape) + (prior.shape - 1.0) * x.ln()
        - prior.rate * x
}

/// Draws the missing entries of both blocks from their conditionals given
/// everything else. No-op with the likelihood disabled.
pub fn impute_missing(state: &mut ChainState, ctx: &ModelContext, rng: &mut Rng) -> Result<()> {
    if !ctx.likelihood_on() {
        return Ok(());
    }
    let tau2c = state.tau2_coord(ctx);
    // Longitudinal block: coordinates are independent given the trajectory.
    for i in 0..ctx.n_subjects() {
        if ctx.data.y_observed[i].iter().all(|&o| o) {
            continue;
        }
        let x_i = ctx.data.x.row(i).transpose();
        let bx = &state.beta_y * &x_i;
        let theta = &state.atoms[state.labels[i]].theta;
        for t in 0..ctx.p_y() {
            if !ctx.data.y_observed[i][t] {
                let mean = theta[t] + bx[t];
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                state.y[(i, t)] = mean + tau2c[t].sqrt() * z;
            }
        }
    }
    // Metabolite block: condition through the precision matrix, whose
    // missing-block submatrix is exactly the conditional precision.
    for i in 0..ctx.n_subjects() {
        let missing: Vec<usize> =
            (0..ctx.p_m()).filter(|&j| !ctx.data.m_observed[i][j]).collect();
        if missing.is_empty() {
            continue;
        }
        let observed: Vec<usize> =
            (0..ctx.p_m()).filter(|&j| ctx.data.m_observed[i][j]).collect();
        let x_i = ctx.data.x.row(i).transpose();
        let mu = &state.beta_m * &x_i;
        let omega = state.atoms[state.labels[i]].omega.matrix();
        let nm = missing.len();
        let omega_mm =
            DMatrix::from_fn(nm, nm, |a, b| omega[(missing[a], missing[b])]);
        let chol_mm = CholFactor::strict(&omega_mm, "missing-block precision")?;
        let mean = if observed.is_empty() {
            DVector::from_fn(nm, |a, _| mu[missing[a]])
        } else {
            let omega_mo = DMatrix::from_fn(nm, observed.len(), |a, b| {
                omega[(missing[a], observed[b])]
            });
            let resid_o =
                DVector::from_fn(observed.len(), |b, _| state.m[(i, observed[b])] - mu[observed[b]]);
            DVector::from_fn(nm, |a, _| mu[missing[a]]) - chol_mm.solve_vec(&(omega_mo * resid_o))
        };
        let draw = chol_mm.sample_precision(&mean, rng);
        for (k, &j) in missing.iter().enumerate() {
            state.m[(i, j)] = draw[k];
        }
    }
    Ok(())
}

/// One auxiliary-atom urn sweep over cluster assignments.
pub fn urn_sweep(state: &mut ChainState, ctx: &ModelContext, rng: &mut Rng) -> Result<UrnStats> {
    let mut labels = std::mem::take(&mut state.labels);
    let mut atoms = std::mem::take(&mut state.atoms);
    let view = UrnView {
        ctx,
        y: &state.y,
        m: &state.m,
        beta_y: &state.beta_y,
        beta_m: &state.beta_m,
        tau2_coord: state.tau2_coord(ctx),
        mu_theta: &state.mu_theta,
        kernel_k: &state.kernel_k,
    };
    let result = polya_urn_sweep(&mut labels, &mut atoms, &view, &ctx.urn, rng);
    state.labels = labels;
    state.atoms = atoms;
    result
}

/// Conjugate Gaussian redraw of every cluster trajectory.
pub fn update_theta_star(state: &mut ChainState, ctx: &ModelContext, rng: &mut Rng) -> Result<()> {
    let p_y = ctx.p_y();
    if p_y == 0 {
        return Ok(());
    }
    let tau2c = state.tau2_coord(ctx);
    for j in 0..state.atoms.len() {
        let members: Vec<usize> =
            (0..state.labels.len()).filter(|&i| state.labels[i] == j).collect();
        let n_j = members.len();
        if !ctx.likelihood_on() || n_j == 0 {
            state.atoms[j].theta = state.kernel_k.sample(&state.mu_theta, rng);
            continue;
        }
        // Precision K^{-1} + n_j T^{-1}, T the diagonal noise covariance.
        let mut precision = state.k_inv.clone();
        let mut arg = &state.k_inv * &state.mu_theta;
        for t in 0..p_y {
            precision[(t, t)] += n_j as f64 / tau2c[t];
        }
        for &i in &members {
            let x_i = ctx.data.x.row(i).transpose();
            let bx = &state.beta_y * &x_i;
            for t in 0..p_y {
                arg[t] += (state.y[(i, t)] - bx[t]) / tau2c[t];
            }
        }
        symmetrize(&mut precision);
        let chol = CholFactor::with_jitter(&precision, "trajectory conditional precision")?;
        let mean = chol.solve_vec(&arg);
        state.atoms[j].theta = chol.sample_precision(&mean, rng);
    }
    Ok(())
}

/// Single-edge Metropolis sweeps on every cluster's (graph, precision).
pub fn update_graphs(
    state: &mut ChainState,
    ctx: &ModelContext,
    cache: &mut NormCache,
    rng: &mut Rng,
) -> Result<BdOutcome> {
    let p_m = ctx.p_m();
    let mut total = BdOutcome::default();
    for j in 0..state.atoms.len() {
        let mut scatter = DMatrix::zeros(p_m, p_m);
        let mut n = 0.0;
        if ctx.likelihood_on() {
            for i in 0..state.labels.len() {
                if state.labels[i] != j {
                    continue;
                }
                let x_i = ctx.data.x.row(i).transpose();
                let resid = state.m.row(i).transpose() - &state.beta_m * &x_i;
                crate::linalg::add_outer(&mut scatter, &resid);
                n += 1.0;
            }
        }
        let atom = &mut state.atoms[j];
        let outcome = bd_update(
            &mut atom.graph,
            &mut atom.omega,
            &ctx.hyper.gw_prior,
            &scatter,
            n,
            ctx.hyper.edge_prior_d,
            ctx.bd_steps,
            &ctx.bd,
            cache,
            rng,
        )?;
        total.n_attempted += outcome.n_attempted;
        total.n_accepted += outcome.n_accepted;
        total.degenerate |= outcome.degenerate;
    }
    Ok(total)
}

/// Joint Metropolis update of the longitudinal covariate coefficients
/// (flat standard-normal prior on every entry).
pub fn update_beta_y(
    state: &mut ChainState,
    ctx: &ModelContext,
    proposal: &mut AdaptiveProposal,
    rng: &mut Rng,
) -> Result<bool> {
    let (p_y, q) = (ctx.p_y(), ctx.q());
    if p_y * q == 0 {
        return Ok(false);
    }
    let tau2c = state.tau2_coord(ctx);
    let likelihood_on = ctx.likelihood_on();
    let y = &state.y;
    let labels = &state.labels;
    let atoms = &state.atoms;
    let x = &ctx.data.x;
    let target = |b: &DVector<f64>| -> f64 {
        let mut lp = -0.5 * b.norm_squared();
        if likelihood_on {
            let beta = DMatrix::from_column_slice(p_y, q, b.as_slice());
            for i in 0..labels.len() {
                let x_i = x.row(i).transpose();
                let bx = &beta * &x_i;
                lp += subject_y_loglik(y, i, &atoms[labels[i]].theta, &bx, &tau2c);
            }
        }
        lp
    };
    let mut b = DVector::from_column_slice(state.beta_y.as_slice());
    let accepted = adaptive_mh_step(&mut b, target, proposal, rng)?;
    state.beta_y = DMatrix::from_column_slice(p_y, q, b.as_slice());
    Ok(accepted)
}

/// Joint Metropolis update of the metabolite covariate coefficients.
pub fn update_beta_m(
    state: &mut ChainState,
    ctx: &ModelContext,
    proposal: &mut AdaptiveProposal,
    rng: &mut Rng,
) -> Result<bool> {
    let (p_m, q) = (ctx.p_m(), ctx.q());
    if p_m * q == 0 {
        return Ok(false);
    }
    let likelihood_on = ctx.likelihood_on();
    let m = &state.m;
    let labels = &state.labels;
    let atoms = &state.atoms;
    let x = &ctx.data.x;
    let target = |b: &DVector<f64>| -> f64 {
        let mut lp = -0.5 * b.norm_squared();
        if likelihood_on {
            let beta = DMatrix::from_column_slice(p_m, q, b.as_slice());
            for i in 0..labels.len() {
                let x_i = x.row(i).transpose();
                let mean = &beta * &x_i;
                let m_i = m.row(i).transpose();
                lp += gaussian_logdensity_precision(&m_i, &mean, &atoms[labels[i]].omega);
            }
        }
        lp
    };
    let mut b = DVector::from_column_slice(state.beta_m.as_slice());
    let accepted = adaptive_mh_step(&mut b, target, proposal, rng)?;
    state.beta_m = DMatrix::from_column_slice(p_m, q, b.as_slice());
    Ok(accepted)
}

/// Conjugate inverse-gamma redraw of each process noise variance.
pub fn update_tau2(state: &mut ChainState, ctx: &ModelContext, rng: &mut Rng) -> Result<()> {
    let prior = ctx.hyper.tau2;
    for s in 0..state.tau2.len() {
        if !ctx.likelihood_on() {
            state.tau2[s] = inv_gamma_draw(prior.shape, prior.rate, rng)?;
            continue;
        }
        let coords: Vec<usize> =
            (0..ctx.p_y()).filter(|&t| ctx.proc_of[t] == s).collect();
        let n_points = (ctx.n_subjects() * coords.len()) as f64;
        let mut ss = 0.0;
        for i in 0..ctx.n_subjects() {
            let x_i = ctx.data.x.row(i).transpose();
            let bx = &state.beta_y * &x_i;
            let theta = &state.atoms[state.labels[i]].theta;
            for &t in &coords {
                let r = state.y[(i, t)] - theta[t] - bx[t];
                ss += r * r;
            }
        }
        state.tau2[s] = inv_gamma_draw(prior.shape + 0.5 * n_points, prior.rate + 0.5 * ss, rng)?;
    }
    Ok(())
}

/// Conjugate Gaussian redraw of the trajectory prior mean. The data enter
/// only through the cluster trajectories, so the same formula serves both
/// likelihood modes.
pub fn update_mu_theta(state: &mut ChainState, ctx: &ModelContext, rng: &mut Rng) -> Result<()> {
    let p_y = ctx.p_y();
    if p_y == 0 {
        return Ok(());
    }
    let k_n = state.atoms.len() as f64;
    let prior_var = ctx.hyper.mu_theta_sd * ctx.hyper.mu_theta_sd;
    let mut precision = &state.k_inv * k_n;
    for t in 0..p_y {
        precision[(t, t)] += 1.0 / prior_var;
    }
    let theta_sum = state
        .atoms
        .iter()
        .fold(DVector::zeros(p_y), |acc, a| acc + &a.theta);
    let mut arg = &state.k_inv * theta_sum;
    arg.add_scalar_mut(ctx.hyper.mu_theta_mean / prior_var);
    symmetrize(&mut precision);
    let chol = CholFactor::with_jitter(&precision, "trajectory mean conditional")?;
    let mean = chol.solve_vec(&arg);
    state.mu_theta = chol.sample_precision(&mean, rng);
    Ok(())
}

/// Joint Metropolis update of all kernel hyperparameters on the log scale
/// (Jacobian included). A proposal whose kernel fails to factor is
/// rejected.
pub fn update_kernel(
    state: &mut ChainState,
    ctx: &ModelContext,
    proposal: &mut AdaptiveProposal,
    rng: &mut Rng,
) -> Result<bool> {
    let n_proc = ctx.grid.n_processes;
    let dim = 3 + n_proc;
    let hyper = &ctx.hyper;
    let grid = &ctx.grid;
    let atoms = &state.atoms;
    let mu_theta = &state.mu_theta;
    let target = |z: &DVector<f64>| -> f64 {
        let params = kernel_from_log(z, n_proc);
        let mut lp = inv_gamma_logpdf(params.sigma2, hyper.sigma2)
            + inv_gamma_logpdf(params.phi2, hyper.phi2)
            + inv_gamma_logpdf(params.eta2, hyper.eta2)
            + z.sum(); // log-scale Jacobian
        for &xi in &params.xi {
            lp += gamma_logpdf(xi, hyper.xi);
        }
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match build_kernel(&params, grid) {
            Ok(k) => {
                for atom in atoms {
                    lp += k.logpdf(&atom.theta, mu_theta);
                }
                lp
            }
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let mut z = DVector::zeros(dim);
    z[0] = state.kernel.sigma2.ln();
    z[1] = state.kernel.phi2.ln();
    z[2] = state.kernel.eta2.ln();
    for s in 0..n_proc {
        z[3 + s] = state.kernel.xi[s].ln();
    }
    let accepted = adaptive_mh_step(&mut z, target, proposal, rng)?;
    if accepted {
        let params = kernel_from_log(&z, n_proc);
        let k = build_kernel(&params, grid)?;
        state.set_kernel(params, k);
    }
    Ok(accepted)
}

fn kernel_from_log(z: &DVector<f64>, n_proc: usize) -> KernelParams {
    KernelParams {
        sigma2: z[0].exp(),
        phi2: z[1].exp(),
        eta2: z[2].exp(),
        xi: (0..n_proc).map(|s| z[3 + s].exp()).collect(),
    }
}
