//! Dense linear-algebra helpers shared by the kernel, graphical-model and
//! sampler modules. Everything is f64 and column-major via nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Jitter ladder for near-singular covariance factorizations: try the bare
/// matrix, then ridges 1e-10, 1e-9, ..., up to 1e-6.
pub const JITTER_LADDER_MAX: f64 = 1.0e-6;
const JITTER_LADDER_START: f64 = 1.0e-10;

/// Cholesky factor of a symmetric positive definite matrix together with the
/// diagonal ridge that was needed to factor it.
#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    ridge: f64,
    dim: usize,
}

impl CholFactor {
    /// Factors `m`, walking the jitter ladder if the bare factorization
    /// fails. `context` names the matrix in the error message.
    pub fn with_jitter(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        let dim = m.nrows();
        debug_assert_eq!(dim, m.ncols());
        if let Some(chol) = Cholesky::new(m.clone()) {
            return Ok(CholFactor { chol, ridge: 0.0, dim });
        }
        let mut ridge = JITTER_LADDER_START;
        while ridge <= JITTER_LADDER_MAX * (1.0 + 1e-12) {
            let mut jittered = m.clone();
            for i in 0..dim {
                jittered[(i, i)] += ridge;
            }
            if let Some(chol) = Cholesky::new(jittered) {
                return Ok(CholFactor { chol, ridge, dim });
            }
            ridge *= 10.0;
        }
        Err(Error::numerical(format!(
            "{context}: not positive definite even with ridge {JITTER_LADDER_MAX:e}"
        )))
    }

    /// Factors `m` without any jitter; fails if it is not positive definite.
    pub fn strict(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        let dim = m.nrows();
        Cholesky::new(m.clone())
            .map(|chol| CholFactor { chol, ridge: 0.0, dim })
            .ok_or_else(|| Error::numerical(format!("{context}: not positive definite")))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Lower-triangular factor L with L L^T = A (+ ridge I). Owned copy:
    /// the internal buffer's strict upper triangle holds stale input data,
    /// so it must never leak into full-matrix arithmetic.
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            acc += self.chol.l_dirty()[(i, i)].ln();
        }
        2.0 * acc
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// x^T A^{-1} x via one triangular solve.
    pub fn inv_quad_form(&self, x: &DVector<f64>) -> f64 {
        let mut y = x.clone();
        self.chol
            .l_dirty()
            .solve_lower_triangular_mut(&mut y);
        y.norm_squared()
    }

    /// Draws from N(mean, A) where A is the factored matrix (covariance).
    pub fn sample_cov(&self, mean: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        let z = standard_normal_vector(self.dim, rng);
        mean + self.l() * z
    }

    /// Draws from N(mean, A^{-1}) where A is the factored matrix (precision).
    pub fn sample_precision(&self, mean: &DVector<f64>, rng: &mut Rng) -> DVector<f64> {
        let mut z = standard_normal_vector(self.dim, rng);
        // Solve L^T x = z so that Cov(x) = L^{-T} L^{-1} = A^{-1}.
        let lt = self.l().transpose();
        if !lt.solve_upper_triangular_mut(&mut z) {
            // L has strictly positive diagonal, so this cannot happen.
            unreachable!("triangular solve with positive diagonal failed");
        }
        mean + z
    }

    /// Log density of N(mean, A) at x, with A the factored covariance.
    pub fn gaussian_logpdf_cov(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let d = x - mean;
        -0.5 * (self.dim as f64 * LN_2PI + self.log_det() + self.inv_quad_form(&d))
    }
}

pub fn standard_normal_vector(dim: usize, rng: &mut Rng) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Numerically stable log(sum(exp(v))).
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Forces exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// v v^T added onto `acc` (scatter accumulation).
pub fn add_outer(acc: &mut DMatrix<f64>, v: &DVector<f64>) {
    let n = v.len();
    for j in 0..n {
        let vj = v[j];
        for i in 0..n {
            acc[(i, j)] += v[i] * vj;
        }
    }
}

/// x^T A x for symmetric A.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let xj = x[j];
        let col = a.column(j);
        let mut dot = 0.0;
        for i in 0..n {
            dot += col[i] * x[i];
        }
        acc += xj * dot;
    }
    acc
}
