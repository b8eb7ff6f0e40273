//! G-Wishart distribution over precision matrices with structural zeros.
//!
//! Density convention: p(Omega | G, nu, Psi) proportional to
//!     |Omega|^{(nu-2)/2} exp(-tr(Psi Omega) / 2)
//! restricted to positive definite matrices with Omega[h][k] = 0 off the
//! graph. On the complete graph this is a Wishart with nu + p - 1
//! conventional degrees of freedom and scale Psi^{-1}; on the empty graph
//! the diagonal entries are independent Gamma(nu/2, rate Psi[h][h]/2).

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ggm::graph::Graph;
use crate::linalg::{symmetrize, CholFactor, LN_2PI};
use crate::rng::Rng;

/// Structural zeros must be reproduced to this absolute tolerance.
pub const PATTERN_TOL: f64 = 1.0e-10;
/// Cap on pattern-completion sweeps within one draw.
pub const COMPLETION_MAX_SWEEPS: usize = 10_000;
/// Block-Gibbs refinement sweeps appended to each completion draw.
pub const DEFAULT_REFINE_SWEEPS: usize = 5;

#[derive(Debug, Clone)]
pub struct GWishartParams {
    /// Shape-like degrees of freedom, must exceed 2.
    pub nu: f64,
    /// Positive definite scale-inverse matrix.
    pub psi: DMatrix<f64>,
}

impl GWishartParams {
    pub fn new(nu: f64, psi: DMatrix<f64>) -> Result<Self> {
        if !(nu.is_finite() && nu > 2.0) {
            return Err(Error::InvalidArgument(format!(
                "G-Wishart degrees of freedom must exceed 2, got {nu}"
            )));
        }
        if psi.nrows() != psi.ncols() {
            return Err(Error::InvalidArgument("Psi must be square".to_string()));
        }
        if (psi.clone() - psi.transpose()).amax() > 1e-8 {
            return Err(Error::InvalidArgument("Psi must be symmetric".to_string()));
        }
        CholFactor::strict(&psi, "G-Wishart scale Psi")?;
        Ok(GWishartParams { nu, psi })
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    /// Conjugate update for n centered observations with scatter sum m m^T.
    pub fn posterior(&self, scatter: &DMatrix<f64>, n: f64) -> Result<Self> {
        let mut psi = &self.psi + scatter;
        symmetrize(&mut psi);
        GWishartParams::new(self.nu + n, psi)
    }
}

/// Precision matrix tied to a graph: structural zeros are exact and the
/// matrix is positive definite. The log determinant is cached.
#[derive(Debug, Clone)]
pub struct PrecisionMatrix {
    matrix: DMatrix<f64>,
    log_det: f64,
}

impl PrecisionMatrix {
    /// Validates the zero pattern (off-graph entries below PATTERN_TOL,
    /// then snapped to exact zeros) and positive definiteness.
    pub fn new(mut matrix: DMatrix<f64>, graph: &Graph, context: &str) -> Result<Self> {
        let p = graph.n_nodes();
        if matrix.nrows() != p || matrix.ncols() != p {
            return Err(Error::InvalidArgument(format!(
                "{context}: matrix is {}x{}, graph has {p} nodes",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        symmetrize(&mut matrix);
        for h in 0..p {
            for k in (h + 1)..p {
                if !graph.has_edge(h, k) {
                    let v = matrix[(h, k)];
                    if v.abs() >= PATTERN_TOL {
                        return Err(Error::numerical(format!(
                            "{context}: pattern violation {v:e} at non-edge ({h}, {k})"
                        )));
                    }
                    matrix[(h, k)] = 0.0;
                    matrix[(k, h)] = 0.0;
                }
            }
        }
        let log_det = if p == 0 {
            0.0
        } else {
            CholFactor::strict(&matrix, context)?.log_det()
        };
        Ok(PrecisionMatrix { matrix, log_det })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        crate::linalg::quad_form(&self.matrix, v)
    }
}

/// Log density of N_p(x | mean, Omega) with Omega a precision matrix.
pub fn gaussian_logdensity_precision(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    omega: &PrecisionMatrix,
) -> f64 {
    let p = omega.dim() as f64;
    let d = x - mean;
    0.5 * omega.log_det() - 0.5 * p * LN_2PI - 0.5 * omega.quad_form(&d)
}

/// Unnormalized G-Wishart log density at omega.
pub fn gwishart_logdensity(omega: &PrecisionMatrix, params: &GWishartParams) -> f64 {
    let trace: f64 = params
        .psi
        .iter()
        .zip(omega.matrix().iter())
        .map(|(a, b)| a * b)
        .sum();
    0.5 * (params.nu - 2.0) * omega.log_det() - 0.5 * trace
}

/// Bartlett draw from the complete-graph law: Wishart with nu + p - 1
/// conventional degrees of freedom and scale Psi^{-1}.
fn sample_wishart_complete(params: &GWishartParams, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let p = params.dim();
    let df = params.nu + p as f64 - 1.0;
    let chol_psi = CholFactor::strict(&params.psi, "Psi")?;
    let inv_psi = chol_psi.inverse();
    let c = CholFactor::strict(&inv_psi, "Psi^{-1}")?;
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| {
            Error::numerical(format!("chi-squared with df {} invalid: {e}", df - i as f64))
        })?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = c.l() * a;
    let mut w = &la * la.transpose();
    symmetrize(&mut w);
    Ok(w)
}

/// Maximum absolute off-pattern entry of `k`.
fn pattern_violation(k: &DMatrix<f64>, graph: &Graph) -> f64 {
    let p = graph.n_nodes();
    let mut worst: f64 = 0.0;
    for h in 0..p {
        for j in (h + 1)..p {
            if !graph.has_edge(h, j) {
                worst = worst.max(k[(h, j)].abs());
            }
        }
    }
    worst
}

/// One cycle of the pattern-completion projection: for each vertex, replace
/// the off-diagonal covariance column by its best prediction from the
/// neighbor block, which drives the off-pattern precision entries to zero
/// while matching the sampled covariance on diagonal and edges.
fn completion_sweep(w: &mut DMatrix<f64>, sigma: &DMatrix<f64>, graph: &Graph) -> Result<f64> {
    let p = graph.n_nodes();
    let mut max_change: f64 = 0.0;
    for j in 0..p {
        let nbr = graph.neighbors(j);
        let others: Vec<usize> = (0..p).filter(|&u| u != j).collect();
        let new_col: Vec<f64> = if nbr.is_empty() {
            vec![0.0; p - 1]
        } else {
            let w_nn = DMatrix::from_fn(nbr.len(), nbr.len(), |a, b| w[(nbr[a], nbr[b])]);
            let s_nj = DVector::from_fn(nbr.len(), |a, _| sigma[(nbr[a], j)]);
            let chol = CholFactor::with_jitter(&w_nn, "completion neighbor block")?;
            let beta = chol.solve_vec(&s_nj);
            others
                .iter()
                .map(|&u| {
                    let mut acc = 0.0;
                    for (bi, &nb) in nbr.iter().enumerate() {
                        acc += w[(u, nb)] * beta[bi];
                    }
                    acc
                })
                .collect()
        };
        for (ui, &u) in others.iter().enumerate() {
            let v = if nbr.contains(&u) { sigma[(u, j)] } else { new_col[ui] };
            max_change = max_change.max((w[(u, j)] - v).abs());
            w[(u, j)] = v;
            w[(j, u)] = v;
        }
    }
    Ok(max_change)
}

/// One exact block-Gibbs sweep over vertices, leaving the G-Wishart law
/// invariant. For vertex j with neighbors A the conditional factorizes as
/// gamma(nu/2, Psi[j][j]/2) for the Schur complement and a Gaussian for the
/// free column entries.
fn block_gibbs_sweep(
    k: &mut DMatrix<f64>,
    graph: &Graph,
    params: &GWishartParams,
    rng: &mut Rng,
) -> Result<()> {
    let p = graph.n_nodes();
    for j in 0..p {
        let others: Vec<usize> = (0..p).filter(|&u| u != j).collect();
        let nbr = graph.neighbors(j);
        let gamma = Gamma::new(params.nu / 2.0, 2.0 / params.psi[(j, j)])
            .map_err(|e| Error::numerical(format!("gamma draw: {e}")))?;
        let gam = gamma.sample(rng);
        if nbr.is_empty() {
            k[(j, j)] = gam;
            continue;
        }
        let k_rest = DMatrix::from_fn(p - 1, p - 1, |a, b| k[(others[a], others[b])]);
        let chol_rest = CholFactor::strict(&k_rest, "block-gibbs rest block")?;
        // Q = [(K_{-j,-j})^{-1}]_{AA} in reduced indexing.
        let a_reduced: Vec<usize> = nbr
            .iter()
            .map(|&u| others.iter().position(|&o| o == u).expect("neighbor is an other"))
            .collect();
        let mut e_a = DMatrix::<f64>::zeros(p - 1, nbr.len());
        for (col, &ar) in a_reduced.iter().enumerate() {
            e_a[(ar, col)] = 1.0;
        }
        let solved = chol_rest.solve_mat(&e_a);
        let mut q = DMatrix::<f64>::zeros(nbr.len(), nbr.len());
        for (row, &ar) in a_reduced.iter().enumerate() {
            for col in 0..nbr.len() {
                q[(row, col)] = solved[(ar, col)];
            }
        }
        symmetrize(&mut q);
        // u ~ N(-(Psi_jj Q)^{-1} Psi_{A,j}, (Psi_jj Q)^{-1}).
        let precision = &q * params.psi[(j, j)];
        let chol_prec = CholFactor::with_jitter(&precision, "block-gibbs column precision")?;
        let psi_aj = DVector::from_fn(nbr.len(), |a, _| params.psi[(nbr[a], j)]);
        let mean = chol_prec.solve_vec(&(-&psi_aj));
        let u = chol_prec.sample_precision(&mean, rng);
        let quad = (u.transpose() * &q * &u)[(0, 0)];
        for (ai, &a) in nbr.iter().enumerate() {
            k[(a, j)] = u[ai];
            k[(j, a)] = u[ai];
        }
        k[(j, j)] = gam + quad;
    }
    Ok(())
}

/// Draws from the G-Wishart: a complete-graph Bartlett draw is projected
/// onto the zero pattern by iterated blockwise conditioning (until the
/// worst off-pattern precision entry is below PATTERN_TOL, cap
/// COMPLETION_MAX_SWEEPS), then refined with `refine_sweeps` exact
/// block-Gibbs sweeps.
pub fn gwishart_sample(
    params: &GWishartParams,
    graph: &Graph,
    refine_sweeps: usize,
    rng: &mut Rng,
) -> Result<PrecisionMatrix> {
    let p = graph.n_nodes();
    if params.dim() != p {
        return Err(Error::InvalidArgument(format!(
            "Psi is {}x{} but graph has {p} nodes",
            params.dim(),
            params.dim()
        )));
    }
    if p == 0 {
        return PrecisionMatrix::new(DMatrix::zeros(0, 0), graph, "gwishart 0-dim");
    }
    let full = sample_wishart_complete(params, rng)?;
    let mut k = if graph.n_edges() == graph.n_pairs() {
        full
    } else {
        let chol_full = CholFactor::strict(&full, "complete-graph draw")?;
        let sigma = chol_full.inverse();
        let mut w = sigma.clone();
        let mut converged = false;
        for sweep in 1..=COMPLETION_MAX_SWEEPS {
            let change = completion_sweep(&mut w, &sigma, graph)?;
            let chol_w = CholFactor::with_jitter(&w, "completed covariance")?;
            let k_candidate = chol_w.inverse();
            if pattern_violation(&k_candidate, graph) < PATTERN_TOL {
                converged = true;
                break;
            }
            if change == 0.0 && sweep > 2 {
                return Err(Error::numerical(format!(
                    "pattern completion stalled after {sweep} sweeps with violation {:e}",
                    pattern_violation(&k_candidate, graph)
                )));
            }
        }
        if !converged {
            return Err(Error::numerical(format!(
                "pattern completion did not converge within {COMPLETION_MAX_SWEEPS} sweeps"
            )));
        }
        let chol_w = CholFactor::strict(&w, "completed covariance")?;
        chol_w.inverse()
    };
    symmetrize(&mut k);
    for _ in 0..refine_sweeps {
        block_gibbs_sweep(&mut k, graph, params, rng)?;
    }
    PrecisionMatrix::new(k, graph, "gwishart draw")
}

/// In-place refresh of an existing draw by exact block-Gibbs sweeps; leaves
/// the G-Wishart law invariant, so it can replace a fresh draw whenever the
/// graph is unchanged.
pub fn gwishart_refresh(
    omega: &mut PrecisionMatrix,
    graph: &Graph,
    params: &GWishartParams,
    sweeps: usize,
    rng: &mut Rng,
) -> Result<()> {
    let mut k = omega.matrix().clone();
    for _ in 0..sweeps {
        block_gibbs_sweep(&mut k, graph, params, rng)?;
    }
    *omega = PrecisionMatrix::new(k, graph, "gwishart refresh")?;
    Ok(())
}

/// Monte Carlo estimate of the log normalizing constant log I_G(nu, Psi).
#[derive(Debug, Clone, Copy)]
pub struct LogNormEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Estimates log I_G over the cone of G-constrained Cholesky factors: free
/// diagonal elements are chi distributed, free off-diagonals standard
/// normal, and constrained elements are completed deterministically; the
/// estimator averages exp(-sum(constrained^2)/2) over n_mc draws.
pub fn gwishart_lognorm_mc(
    params: &GWishartParams,
    graph: &Graph,
    n_mc: usize,
    rng: &mut Rng,
) -> Result<LogNormEstimate> {
    let p = graph.n_nodes();
    if params.dim() != p {
        return Err(Error::InvalidArgument(format!(
            "Psi is {}x{} but graph has {p} nodes",
            params.dim(),
            params.dim()
        )));
    }
    if n_mc == 0 {
        return Err(Error::InvalidArgument("n_mc must be positive".to_string()));
    }
    if p == 0 {
        return Ok(LogNormEstimate { value: 0.0, std_error: 0.0 });
    }
    let delta = params.nu;
    let chol_psi = CholFactor::strict(&params.psi, "Psi")?;
    let inv_psi = chol_psi.inverse();
    let chol_inv = CholFactor::strict(&inv_psi, "Psi^{-1}")?;
    // Upper triangular T with T^T T = Psi^{-1}.
    let t = chol_inv.l().transpose();
    // Column-scaled version: h[k][j] = t[k][j] / t[j][j].
    let mut h = t.clone();
    for j in 0..p {
        let tjj = t[(j, j)];
        for kk in 0..=j {
            h[(kk, j)] /= tjj;
        }
    }

    let later: Vec<usize> = (0..p)
        .map(|i| ((i + 1)..p).filter(|&j| graph.has_edge(i, j)).count())
        .collect();
    let earlier: Vec<usize> = (0..p)
        .map(|j| (0..j).filter(|&i| graph.has_edge(i, j)).count())
        .collect();

    let mut deterministic = 0.5 * graph.n_edges() as f64 * LN_2PI;
    for i in 0..p {
        let dfi = delta + later[i] as f64;
        deterministic += 0.5 * dfi * std::f64::consts::LN_2
            + ln_gamma(0.5 * dfi)
            + (dfi + earlier[i] as f64) * t[(i, i)].ln();
    }

    let n_constrained = graph.n_pairs() - graph.n_edges();
    if n_constrained == 0 {
        return Ok(LogNormEstimate { value: deterministic, std_error: 0.0 });
    }

    let chis: Vec<ChiSquared<f64>> = later
        .iter()
        .map(|&nu_i| ChiSquared::new(delta + nu_i as f64).expect("df > 2"))
        .collect();
    let mut psi_m = DMatrix::<f64>::zeros(p, p);
    // phi_scaled[r][c] = sum_{k=r..c} psi[r][k] h[k][c]; completed row by row.
    let mut phi_scaled = DMatrix::<f64>::zeros(p, p);
    let mut sum_w = 0.0;
    let mut sum_w2 = 0.0;
    for _ in 0..n_mc {
        let mut penalty = 0.0;
        for i in 0..p {
            psi_m[(i, i)] = chis[i].sample(rng).sqrt();
            for j in (i + 1)..p {
                if graph.has_edge(i, j) {
                    psi_m[(i, j)] = rng.sample(StandardNormal);
                } else {
                    let mut partial = 0.0;
                    for k in i..j {
                        partial += psi_m[(i, k)] * h[(k, j)];
                    }
                    let mut cross = 0.0;
                    for r in 0..i {
                        cross += phi_scaled[(r, i)] * phi_scaled[(r, j)];
                    }
                    let v = -partial - cross / psi_m[(i, i)];
                    psi_m[(i, j)] = v;
                    penalty += v * v;
                }
            }
            for c in i..p {
                let mut acc = 0.0;
                for k in i..=c {
                    acc += psi_m[(i, k)] * h[(k, c)];
                }
                phi_scaled[(i, c)] = acc;
            }
        }
        let w = (-0.5 * penalty).exp();
        sum_w += w;
        sum_w2 += w * w;
    }
    let mean = sum_w / n_mc as f64;
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::numerical(format!(
            "normalizing-constant Monte Carlo collapsed (mean weight {mean})"
        )));
    }
    let var = ((sum_w2 - sum_w * sum_w / n_mc as f64) / (n_mc as f64 - 1.0).max(1.0)).max(0.0);
    let se_log = (var / n_mc as f64).sqrt() / mean;
    Ok(LogNormEstimate { value: deterministic + mean.ln(), std_error: se_log })
}
