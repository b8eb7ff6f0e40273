//! Random-walk Metropolis proposal with covariance adaptation: the
//! proposal covariance is a rescaled running sample covariance of the
//! chain history (scale 2.38^2/dim, ridge eps), active only inside the
//! adaptation window and frozen afterwards so the post-burn-in kernel is
//! fixed.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::{standard_normal_vector, CholFactor};
use crate::rng::Rng;

/// Ridge added to the adapted covariance.
pub const ADAPT_RIDGE: f64 = 1.0e-6;
/// Standard deviation (per coordinate, before the 1/sqrt(dim) factor) of
/// the pre-adaptation proposal.
pub const INIT_PROPOSAL_SD: f64 = 0.1;
/// Records required before the adapted covariance is trusted.
const MIN_RECORDS: usize = 10;

#[derive(Debug, Clone)]
pub struct AdaptiveProposal {
    dim: usize,
    scale: f64,
    init_sd: f64,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
    active: bool,
    frozen: bool,
    chol: Option<CholFactor>,
    dirty: bool,
}

impl AdaptiveProposal {
    pub fn new(dim: usize) -> Self {
        AdaptiveProposal {
            dim,
            scale: if dim == 0 { 1.0 } else { 2.38f64.powi(2) / dim as f64 },
            init_sd: if dim == 0 { 1.0 } else { INIT_PROPOSAL_SD / (dim as f64).sqrt() },
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
            active: false,
            frozen: false,
            chol: None,
            dirty: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Feeds one chain state into the running moments. Ignored once frozen.
    pub fn record(&mut self, x: &DVector<f64>) {
        if self.frozen || self.dim == 0 {
            return;
        }
        debug_assert_eq!(x.len(), self.dim);
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        // m2 += delta * delta2^T keeps m2/(n-1) an unbiased covariance.
        for j in 0..self.dim {
            for i in 0..self.dim {
                self.m2[(i, j)] += delta[i] * delta2[j];
            }
        }
        self.dirty = true;
    }

    /// Turns use of the adapted covariance on or off (recording continues
    /// either way until frozen).
    pub fn set_active(&mut self, active: bool) {
        self.active = active;
    }

    /// Permanently stops adaptation; the current covariance keeps serving
    /// proposals.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// The covariance the next proposal will use (for the
    /// frozen-after-burn-in assertion and for tests).
    pub fn proposal_covariance(&self) -> DMatrix<f64> {
        if self.uses_adapted() {
            let mut c = &self.m2 / (self.n as f64 - 1.0);
            for i in 0..self.dim {
                c[(i, i)] += ADAPT_RIDGE;
            }
            c * self.scale
        } else {
            DMatrix::identity(self.dim, self.dim) * self.init_sd * self.init_sd
        }
    }

    fn uses_adapted(&self) -> bool {
        (self.active || self.frozen) && self.n >= MIN_RECORDS.max(self.dim + 2)
    }

    /// Draws a proposal centered at `current`.
    pub fn propose(&mut self, current: &DVector<f64>, rng: &mut Rng) -> Result<DVector<f64>> {
        debug_assert_eq!(current.len(), self.dim);
        if self.dim == 0 {
            return Ok(current.clone());
        }
        if !self.uses_adapted() {
            let z = standard_normal_vector(self.dim, rng);
            return Ok(current + z * self.init_sd);
        }
        if self.dirty || self.chol.is_none() {
            let cov = self.proposal_covariance();
            self.chol = Some(CholFactor::with_jitter(&cov, "adaptive proposal covariance")?);
            self.dirty = false;
        }
        Ok(self.chol.as_ref().expect("factored above").sample_cov(current, rng))
    }
}

/// One Metropolis step with a symmetric proposal: returns whether the move
/// was accepted, mutating `x` in place. A proposal with a non-finite log
/// target is rejected outright.
pub fn adaptive_mh_step<F>(
    x: &mut DVector<f64>,
    mut log_target: F,
    proposal: &mut AdaptiveProposal,
    rng: &mut Rng,
) -> Result<bool>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    if proposal.dim() == 0 {
        return Ok(false);
    }
    let candidate = proposal.propose(x, rng)?;
    let log_current = log_target(x);
    let log_candidate = log_target(&candidate);
    if !log_candidate.is_finite() {
        return Ok(false);
    }
    let log_ratio = log_candidate - log_current;
    let accept = log_ratio >= 0.0 || {
        use rand::Rng as _;
        rng.random::<f64>().ln() < log_ratio
    };
    if accept {
        *x = candidate;
    }
    Ok(accept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn running_covariance_matches_batch_formula() {
        let mut prop = AdaptiveProposal::new(2);
        let xs = [
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![-0.5, 0.3]),
            DVector::from_vec(vec![2.2, -1.0]),
            DVector::from_vec(vec![0.4, 0.9]),
        ];
        for x in &xs {
            prop.record(x);
        }
        let n = xs.len() as f64;
        let mean = xs.iter().fold(DVector::zeros(2), |a, x| a + x) / n;
        let mut cov = DMatrix::zeros(2, 2);
        for x in &xs {
            let d = x - &mean;
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        let internal = &prop.m2 / (prop.n as f64 - 1.0);
        assert!((internal - cov).amax() < 1e-12);
    }

    #[test]
    fn freeze_stops_covariance_changes() {
        let mut prop = AdaptiveProposal::new(2);
        let mut rng = substream(41, "adapt-freeze", 0);
        for i in 0..50 {
            prop.record(&DVector::from_vec(vec![i as f64 * 0.1, -(i as f64) * 0.2]));
        }
        prop.set_active(true);
        prop.freeze();
        let before = prop.proposal_covariance();
        // Post-freeze records are ignored.
        for i in 0..50 {
            prop.record(&DVector::from_vec(vec![100.0 + i as f64, 3.0]));
        }
        let after = prop.proposal_covariance();
        assert_eq!(before, after);
        let cur = DVector::zeros(2);
        let _ = prop.propose(&cur, &mut rng).unwrap();
        assert_eq!(prop.proposal_covariance(), before);
    }

    #[test]
    fn mh_on_standard_normal_recovers_moments() {
        // Sample a 2D standard normal through the adaptive walk and check
        // first/second moments: exercises record/propose/accept together.
        let mut rng = substream(42, "adapt-mh", 0);
        let mut prop = AdaptiveProposal::new(2);
        let mut x = DVector::from_vec(vec![2.0, -2.0]);
        let target = |v: &DVector<f64>| -0.5 * v.norm_squared();
        let burn = 2000;
        let keep = 40_000;
        let mut sum = DVector::zeros(2);
        let mut sum_sq = DVector::zeros(2);
        for it in 0..(burn + keep) {
            prop.set_active(it >= 100);
            let _ = adaptive_mh_step(&mut x, target, &mut prop, &mut rng).unwrap();
            if it < burn {
                prop.record(&x);
            } else {
                if it == burn {
                    prop.freeze();
                }
                sum += &x;
                sum_sq += x.component_mul(&x);
            }
        }
        let mean = sum / keep as f64;
        let var = sum_sq / keep as f64 - mean.component_mul(&mean);
        assert!(mean.amax() < 0.08, "mean {mean}");
        assert!((var[0] - 1.0).abs() < 0.1, "var {var}");
        assert!((var[1] - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn zero_dimensional_block_is_inert() {
        let mut prop = AdaptiveProposal::new(0);
        let mut rng = substream(43, "adapt-zero", 0);
        let mut x = DVector::zeros(0);
        let moved = adaptive_mh_step(&mut x, |_| 0.0, &mut prop, &mut rng).unwrap();
        assert!(!moved);
    }
}
