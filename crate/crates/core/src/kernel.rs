//! Multi-process squared-exponential kernel for the trajectory block.
//!
//! Coordinate (s, t) pairs one process index with one observation time; the
//! covariance between coordinates is
//!     xi_s1 * xi_s2 * sigma2 * exp(-(t1 - t2)^2 / phi2)
//! plus a nugget eta2 on exact (process, time) coincidences, i.e. on the
//! diagonal. Equal times in different processes get no nugget.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CholFactor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct KernelParams {
    pub sigma2: f64,
    pub phi2: f64,
    pub eta2: f64,
    /// One loading per process.
    pub xi: Vec<f64>,
}

impl KernelParams {
    pub fn validate(&self, n_processes: usize) -> Result<()> {
        for (name, v) in [("sigma2", self.sigma2), ("phi2", self.phi2), ("eta2", self.eta2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "kernel parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.xi.len() != n_processes {
            return Err(Error::InvalidArgument(format!(
                "expected {n_processes} xi loadings, got {}",
                self.xi.len()
            )));
        }
        for (s, &v) in self.xi.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "kernel loading xi[{s}] must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Flattened (process, time) coordinates in model order: processes in
/// declared order, times ascending within each process.
#[derive(Debug, Clone)]
pub struct CoordGrid {
    pub coords: Vec<(usize, f64)>,
    pub n_processes: usize,
}

impl CoordGrid {
    pub fn from_process_times(times: &[Vec<f64>]) -> Self {
        let coords = times
            .iter()
            .enumerate()
            .flat_map(|(s, ts)| ts.iter().map(move |&t| (s, t)))
            .collect();
        CoordGrid { coords, n_processes: times.len() }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// One covariance entry.
pub fn kernel_entry(params: &KernelParams, s1: usize, t1: f64, s2: usize, t2: f64) -> f64 {
    let d = t1 - t2;
    let mut v = params.xi[s1] * params.xi[s2] * params.sigma2 * (-d * d / params.phi2).exp();
    if s1 == s2 && t1 == t2 {
        v += params.eta2;
    }
    v
}

/// Kernel matrix plus its (possibly ridged) Cholesky factor.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub matrix: DMatrix<f64>,
    pub chol: CholFactor,
}

impl KernelMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Ridge added by the jitter ladder; 0.0 when the bare matrix factored.
    pub fn ridge(&self) -> f64 {
        self.chol.ridge()
    }

    pub fn logpdf(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        self.chol.gaussian_logpdf_cov(x, mean)
    }

    pub fn sample(&self, mean: &DVector<f64>, rng: &mut crate::rng::Rng) -> DVector<f64> {
        self.chol.sample_cov(mean, rng)
    }
}

/// Builds and factors the kernel matrix over `grid`, escalating through the
/// jitter ladder when the bare matrix is numerically singular.
pub fn build_kernel(params: &KernelParams, grid: &CoordGrid) -> Result<KernelMatrix> {
    params.validate(grid.n_processes)?;
    let p = grid.dim();
    let mut k = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let (si, ti) = grid.coords[i];
        for j in 0..=i {
            let (sj, tj) = grid.coords[j];
            let v = kernel_entry(params, si, ti, sj, tj);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let chol = CholFactor::with_jitter(&k, "kernel matrix").map_err(|_| {
        Error::numerical(format!(
            "kernel matrix not positive definite within jitter ladder \
             (sigma2={}, phi2={}, eta2={}, xi={:?})",
            params.sigma2, params.phi2, params.eta2, params.xi
        ))
    })?;
    Ok(KernelMatrix { matrix: k, chol })
}

/// Conditional law of the `missing` coordinates of N(mu, cov) given the
/// `observed` coordinates equal `x_obs`. Returns (mean, covariance) of the
/// missing block. Errors when nothing is missing.
pub fn gaussian_conditional(
    x_obs: &DVector<f64>,
    observed: &[usize],
    missing: &[usize],
    mu: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if missing.is_empty() {
        return Err(Error::InvalidArgument(
            "gaussian_conditional called with no missing coordinates".to_string(),
        ));
    }
    if x_obs.len() != observed.len() {
        return Err(Error::InvalidArgument(format!(
            "observed values ({}) and indices ({}) disagree",
            x_obs.len(),
            observed.len()
        )));
    }
    let nm = missing.len();
    let no = observed.len();
    let mu_m = DVector::from_fn(nm, |i, _| mu[missing[i]]);
    let k_mm = DMatrix::from_fn(nm, nm, |i, j| cov[(missing[i], missing[j])]);
    if no == 0 {
        return Ok((mu_m, k_mm));
    }
    let mu_o = DVector::from_fn(no, |i, _| mu[observed[i]]);
    let k_oo = DMatrix::from_fn(no, no, |i, j| cov[(observed[i], observed[j])]);
    let k_mo = DMatrix::from_fn(nm, no, |i, j| cov[(missing[i], observed[j])]);
    let chol_oo = CholFactor::with_jitter(&k_oo, "observed-block covariance")?;
    let resid = x_obs - mu_o;
    let w = chol_oo.solve_mat(&k_mo.transpose()); // K_oo^{-1} K_om
    let mean = &mu_m + w.transpose() * &resid;
    let mut cov_m = &k_mm - &k_mo * w;
    crate::linalg::symmetrize(&mut cov_m);
    Ok((mean, cov_m))
}
