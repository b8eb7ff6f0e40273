//! Dirichlet-process partition machinery: canonical partitions, Chinese
//! restaurant process facts, an auxiliary-atom Gibbs sweep for
//! non-conjugate mixtures, and an exactly-enumerated marginal partition
//! weight for small metabolite-only problems.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::ggm::bd::NormCache;
use crate::ggm::graph::{enumerate_graphs, graph_prior_logpmf};
use crate::ggm::gwishart::GWishartParams;
use crate::linalg::{add_outer, log_sum_exp};
use crate::rng::Rng;

/// A partition of subjects into labeled clusters. Labels are kept
/// contiguous (0..K-1) but not necessarily in first-appearance order;
/// `canonical_labels` relabels for comparisons across iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
}

impl Partition {
    /// Validates contiguity: every label below the maximum must occur.
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("partition of zero subjects".to_string()));
        }
        let k = labels.iter().max().unwrap() + 1;
        let mut seen = vec![false; k];
        for &l in &labels {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "partition labels are not contiguous: label {missing} unused"
            )));
        }
        Ok(Partition { labels })
    }

    pub fn singleton_cluster(n: usize) -> Self {
        Partition { labels: vec![0; n] }
    }

    pub fn n_subjects(&self) -> usize {
        self.labels.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.n_clusters()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster).collect()
    }

    /// Labels relabeled in order of first appearance: the canonical form
    /// shared by all label permutations of the same partition.
    pub fn canonical_labels(&self) -> Vec<usize> {
        let mut map: Vec<Option<usize>> = vec![None; self.n_clusters()];
        let mut next = 0;
        let mut out = Vec::with_capacity(self.labels.len());
        for &l in &self.labels {
            let c = *map[l].get_or_insert_with(|| {
                let c = next;
                next += 1;
                c
            });
            out.push(c);
        }
        out
    }
}

/// Mean and variance of the number of occupied clusters after n customers
/// of a Chinese restaurant process with concentration alpha.
pub fn crp_k_moments(alpha: f64, n: usize) -> (f64, f64) {
    let mut mean = 0.0;
    let mut var = 0.0;
    for i in 1..=n {
        let denom = alpha + i as f64 - 1.0;
        let p = alpha / denom;
        mean += p;
        var += p * (1.0 - p);
    }
    (mean, var)
}

/// Exact distribution of the cluster count after n customers, via the
/// unsigned Stirling-number recursion. Intended for small n.
pub fn crp_k_pmf(alpha: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1 && n <= 25, "pmf recursion is for small n");
    // stir[k] = |s(m, k)| for the current m.
    let mut stir = vec![0.0f64; n + 1];
    stir[1] = 1.0;
    for m in 1..n {
        let mut next = vec![0.0f64; n + 1];
        for k in 1..=m + 1 {
            next[k] = stir[k - 1] + m as f64 * stir[k];
        }
        stir = next;
    }
    let log_rising: f64 = (0..n).map(|i| (alpha + i as f64).ln()).sum();
    (1..=n)
        .map(|k| (stir[k].ln() + k as f64 * alpha.ln() - log_rising).exp())
        .collect()
}

/// Log prior mass of a partition under the Chinese restaurant process,
/// up to the constant Gamma(alpha)/Gamma(alpha + n).
pub fn crp_log_partition_weight(sizes: &[usize], alpha: f64) -> f64 {
    sizes
        .iter()
        .map(|&s| alpha.ln() + ln_gamma(s as f64))
        .sum()
}

/// Truncated stick-breaking weights: v_j ~ Beta(1, alpha), w_j = v_j
/// prod_{i<j} (1 - v_i). The returned weights sum to less than one.
pub fn stick_breaking_weights(alpha: f64, n_sticks: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(1.0, alpha)
        .map_err(|e| Error::InvalidArgument(format!("stick-breaking beta: {e}")))?;
    let mut remaining = 1.0;
    let mut out = Vec::with_capacity(n_sticks);
    for _ in 0..n_sticks {
        let v: f64 = beta.sample(rng);
        out.push(v * remaining);
        remaining *= 1.0 - v;
    }
    Ok(out)
}

/// Cluster-specific parameters seen through the eyes of the urn sweep.
pub trait AtomModel {
    type Atom: Clone;

    fn n_subjects(&self) -> usize;

    /// Fresh cluster parameters from the base measure given the current
    /// hyperparameter state.
    fn draw_atom(&self, rng: &mut Rng) -> Result<Self::Atom>;

    /// Log likelihood of one subject's data under a candidate atom.
    fn log_likelihood(&self, subject: usize, atom: &Self::Atom) -> f64;
}

#[derive(Debug, Clone, Copy)]
pub struct UrnConfig {
    pub alpha: f64,
    /// Number of auxiliary atoms representing the base measure.
    pub m_aux: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct UrnStats {
    pub n_moved: usize,
    pub n_new_clusters: usize,
}

fn sample_categorical_log(logw: &[f64], rng: &mut Rng) -> usize {
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|w| (w - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// One Gibbs sweep over subjects using auxiliary atoms for the base
/// measure. When a subject currently sits alone, its atom is moved into
/// the first auxiliary slot rather than discarded, which is required for
/// the sweep to leave the posterior invariant.
///
/// `labels` must be contiguous and `atoms` parallel to the cluster labels;
/// both are updated in place and remain contiguous (not necessarily in
/// first-appearance order).
pub fn polya_urn_sweep<M: AtomModel>(
    labels: &mut Vec<usize>,
    atoms: &mut Vec<M::Atom>,
    model: &M,
    cfg: &UrnConfig,
    rng: &mut Rng,
) -> Result<UrnStats> {
    let n = model.n_subjects();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} subjects",
            labels.len()
        )));
    }
    if !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "concentration must be positive, got {}",
            cfg.alpha
        )));
    }
    if cfg.m_aux == 0 {
        return Err(Error::InvalidArgument("m_aux must be at least 1".to_string()));
    }
    let mut sizes = Partition::from_labels(labels.clone())?.cluster_sizes();
    if atoms.len() != sizes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} atoms for {} clusters",
            atoms.len(),
            sizes.len()
        )));
    }
    let mut stats = UrnStats::default();
    let log_alpha_frac = (cfg.alpha / cfg.m_aux as f64).ln();
    for i in 0..n {
        let old = labels[i];
        sizes[old] -= 1;
        let freed_atom = if sizes[old] == 0 {
            let atom = atoms.remove(old);
            sizes.remove(old);
            for l in labels.iter_mut() {
                if *l > old {
                    *l -= 1;
                }
            }
            Some(atom)
        } else {
            None
        };
        let mut aux: Vec<M::Atom> = Vec::with_capacity(cfg.m_aux);
        if let Some(atom) = freed_atom {
            aux.push(atom);
        }
        while aux.len() < cfg.m_aux {
            aux.push(model.draw_atom(rng)?);
        }
        let k = sizes.len();
        let mut logw = Vec::with_capacity(k + cfg.m_aux);
        for j in 0..k {
            logw.push((sizes[j] as f64).ln() + model.log_likelihood(i, &atoms[j]));
        }
        for atom in &aux {
            logw.push(log_alpha_frac + model.log_likelihood(i, atom));
        }
        let choice = sample_categorical_log(&logw, rng);
        if choice < k {
            labels[i] = choice;
            sizes[choice] += 1;
        } else {
            labels[i] = k;
            sizes.push(1);
            atoms.push(aux.swap_remove(choice - k));
            stats.n_new_clusters += 1;
        }
        if labels[i] != old {
            stats.n_moved += 1;
        }
    }
    Ok(stats)
}

/// Exactly-enumerated partitions of {0..n-1} as restricted-growth label
/// vectors (canonical form). The count is the n-th Bell number, so keep n
/// small.
pub fn enumerate_partitions(n: usize) -> Vec<Vec<usize>> {
    assert!(n >= 1 && n <= 12, "partition enumeration is exponential");
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn recurse(labels: &mut Vec<usize>, pos: usize, max_used: usize, out: &mut Vec<Vec<usize>>) {
        if pos == labels.len() {
            out.push(labels.clone());
            return;
        }
        for l in 0..=max_used + 1 {
            labels[pos] = l;
            recurse(labels, pos + 1, max_used.max(l), out);
        }
    }
    // First subject is always label 0.
    recurse(&mut labels, 1, 0, &mut out);
    out
}

/// Log marginal weight of a partition for metabolite-only data: the
/// Chinese restaurant prior times, per cluster, the graph-mixture marginal
/// likelihood obtained by summing normalizing-constant ratios over all
/// graphs. Constant terms shared by every partition of the same data are
/// omitted. Rows of `m` are centered observations.
#[allow(clippy::too_many_arguments)]
pub fn ppmx_log_partition_weight(
    labels: &[usize],
    m: &DMatrix<f64>,
    alpha: f64,
    edge_prior_d: f64,
    prior: &GWishartParams,
    n_mc: usize,
    cache: &mut NormCache,
    rng: &mut Rng,
) -> Result<f64> {
    let n = m.nrows();
    let p = m.ncols();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    let partition = Partition::from_labels(labels.to_vec())?;
    let graphs = enumerate_graphs(p)?;
    let mut total = crp_log_partition_weight(&partition.cluster_sizes(), alpha);
    for cluster in 0..partition.n_clusters() {
        let members = partition.members(cluster);
        let mut scatter = DMatrix::zeros(p, p);
        for &i in &members {
            let row = m.row(i).transpose();
            add_outer(&mut scatter, &row);
        }
        let posterior = prior.posterior(&scatter, members.len() as f64)?;
        let mut log_terms = Vec::with_capacity(graphs.len());
        for g in &graphs {
            let post = cache.log_norm(&posterior, g, n_mc, rng)?;
            let pri = cache.log_norm(prior, g, n_mc, rng)?;
            log_terms.push(graph_prior_logpmf(g, edge_prior_d)? + post - pri);
        }
        total += log_sum_exp(&log_terms);
    }
    Ok(total)
}
