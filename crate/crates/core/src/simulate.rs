//! Forward simulation of clustered longitudinal + metabolite datasets in
//! the input CSV schema, with a ground-truth file for recovery tests.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::ggm::Graph;
use crate::linalg::CholFactor;
use crate::rng::substream;

/// Simulation settings. The default is the two-cluster recovery scenario
/// used by the acceptance suite: strongly separated trajectories and two
/// 4-edge tree graphs sharing two edges.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub n_subjects: usize,
    /// Observation times per process.
    pub process_times: Vec<Vec<f64>>,
    pub p_m: usize,
    /// Cluster labels per subject (defines K).
    pub labels: Vec<usize>,
    /// One trajectory per cluster over the stacked grid.
    pub theta_star: Vec<DVector<f64>>,
    /// One graph per cluster.
    pub graphs: Vec<Graph>,
    /// Precision entry magnitude on graph edges (alternating sign).
    pub edge_weight: f64,
    /// Per-process longitudinal noise variance.
    pub tau2: f64,
    /// Covariate effect per longitudinal coordinate (single covariate).
    pub beta_y_effect: f64,
    /// Covariate effect per metabolite (single covariate).
    pub beta_m_effect: f64,
    pub missing_rate_y: f64,
    pub missing_rate_m: f64,
}

impl Default for SimScenario {
    fn default() -> Self {
        let n = 60;
        let times: Vec<f64> = (0..5).map(|t| t as f64).collect();
        let process_times = vec![times.clone(), times];
        let p_y = 10;
        let labels: Vec<usize> = (0..n).map(|i| if i < n / 2 { 0 } else { 1 }).collect();
        let grid_times: Vec<f64> =
            process_times.iter().flat_map(|ts| ts.iter().copied()).collect();
        let theta_star = vec![
            DVector::from_fn(p_y, |t, _| 1.5 + 0.15 * grid_times[t]),
            DVector::from_fn(p_y, |t, _| -1.5 - 0.15 * grid_times[t]),
        ];
        // Both graphs are forests of two 3-node paths, so the signed
        // adjacency spectrum stays in [-sqrt(2), sqrt(2)] and the unit
        // diagonal keeps the precision SPD up to edge weights of ~0.7.
        let graphs = vec![
            Graph::from_edges(6, &[(0, 1), (1, 2), (3, 4), (4, 5)]).expect("valid edges"),
            Graph::from_edges(6, &[(0, 4), (0, 5), (1, 2), (2, 3)]).expect("valid edges"),
        ];
        SimScenario {
            n_subjects: n,
            process_times,
            p_m: 6,
            labels,
            theta_star,
            graphs,
            edge_weight: 0.6,
            tau2: 0.25,
            beta_y_effect: 0.3,
            beta_m_effect: -0.4,
            missing_rate_y: 0.05,
            missing_rate_m: 0.05,
        }
    }
}

impl SimScenario {
    pub fn p_y(&self) -> usize {
        self.process_times.iter().map(|t| t.len()).sum()
    }

    pub fn k_true(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    fn validate(&self) -> Result<()> {
        if self.labels.len() != self.n_subjects {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} subjects",
                self.labels.len(),
                self.n_subjects
            )));
        }
        let k = self.k_true();
        if self.theta_star.len() != k || self.graphs.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{k} clusters but {} trajectories / {} graphs",
                self.theta_star.len(),
                self.graphs.len()
            )));
        }
        let p_y = self.p_y();
        for (j, th) in self.theta_star.iter().enumerate() {
            if th.len() != p_y {
                return Err(Error::InvalidArgument(format!(
                    "trajectory {j} has {} coordinates, expected {p_y}",
                    th.len()
                )));
            }
        }
        for (j, g) in self.graphs.iter().enumerate() {
            if g.n_nodes() != self.p_m {
                return Err(Error::InvalidArgument(format!(
                    "graph {j} has {} nodes, expected {}",
                    g.n_nodes(),
                    self.p_m
                )));
            }
        }
        for (name, r) in
            [("missing_rate_y", self.missing_rate_y), ("missing_rate_m", self.missing_rate_m)]
        {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("{name} must be in [0,1), got {r}")));
            }
        }
        if !(self.tau2 > 0.0) {
            return Err(Error::InvalidArgument(format!("tau2 must be positive, got {}", self.tau2)));
        }
        Ok(())
    }

    /// Unit-diagonal precision with +/-edge_weight entries on graph edges,
    /// signs alternating over the sorted edge list.
    pub fn true_precision(&self, cluster: usize) -> Result<DMatrix<f64>> {
        let mut omega = DMatrix::identity(self.p_m, self.p_m);
        for (idx, (h, k)) in self.graphs[cluster].edges().into_iter().enumerate() {
            let w = if idx % 2 == 0 { self.edge_weight } else { -self.edge_weight };
            omega[(h, k)] = w;
            omega[(k, h)] = w;
        }
        CholFactor::strict(&omega, "simulated precision")?;
        Ok(omega)
    }
}

/// Ground truth written alongside the simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimTruth {
    pub labels: Vec<usize>,
    /// Edge lists per cluster.
    pub graphs: Vec<Vec<(usize, usize)>>,
    /// Row-major precision matrices per cluster.
    pub omega: Vec<Vec<Vec<f64>>>,
    pub theta_star: Vec<Vec<f64>>,
    pub beta_y: Vec<f64>,
    pub beta_m: Vec<f64>,
    pub tau2: Vec<f64>,
    /// Trajectories are fixed curves, not kernel draws, so there is no
    /// true kernel parameter value.
    pub kernel_params: Option<crate::kernel::KernelParams>,
    pub seed: u64,
}

pub fn load_truth(path: &Path) -> Result<SimTruth> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

#[derive(Debug, Clone)]
pub struct SimOutputs {
    pub files: Vec<PathBuf>,
    pub truth: SimTruth,
    pub config_path: PathBuf,
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    w.write_record(header).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// A config preconfigured for fitting the simulated data: every transform
/// disabled (the data are already on the model scale) and a moderate
/// schedule.
pub fn fit_config_for_simulation(sc: &SimScenario) -> Config {
    let mut config = Config::default();
    config.data.longitudinal = "longitudinal.csv".to_string();
    config.data.metabolites = "metabolites.csv".to_string();
    config.data.covariates = "covariates.csv".to_string();
    config.data.processes = (0..sc.process_times.len()).map(|s| format!("p{}", s + 1)).collect();
    config.data.standardize_longitudinal = false;
    config.data.box_cox_metabolites = false;
    config.data.standardize_metabolites = false;
    config.data.standardize_covariates = false;
    config.mcmc.n_iter = 20_000;
    config.mcmc.n_burnin = 15_000;
    config.mcmc.thin = 1;
    // Sparse edge prior keeps absent-edge posteriors near zero, which the
    // 0.9 differential-network threshold needs to separate the clusters.
    config.model.edge_prior_d = Some(0.15);
    config.output.dir = "out".to_string();
    config
}

/// Simulates one dataset into `dir`: the three input CSVs, `truth.json`,
/// and a ready-to-fit `config.toml`.
pub fn simulate(sc: &SimScenario, dir: &Path, seed: u64) -> Result<SimOutputs> {
    sc.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut rng = substream(seed, "simulate", 0);
    let normal = rand_distr::StandardNormal;
    let n = sc.n_subjects;
    let p_y = sc.p_y();
    let k = sc.k_true();

    let omegas: Vec<DMatrix<f64>> =
        (0..k).map(|c| sc.true_precision(c)).collect::<Result<_>>()?;
    let omega_chols: Vec<CholFactor> = omegas
        .iter()
        .map(|o| CholFactor::strict(o, "simulated precision"))
        .collect::<Result<_>>()?;

    // Single standard-normal covariate.
    let x: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();

    let mut y = DMatrix::zeros(n, p_y);
    for i in 0..n {
        let theta = &sc.theta_star[sc.labels[i]];
        for t in 0..p_y {
            let z: f64 = normal.sample(&mut rng);
            y[(i, t)] = theta[t] + sc.beta_y_effect * x[i] + sc.tau2.sqrt() * z;
        }
    }
    let mut m = DMatrix::zeros(n, sc.p_m);
    for i in 0..n {
        let mean = DVector::from_element(sc.p_m, sc.beta_m_effect * x[i]);
        let draw = omega_chols[sc.labels[i]].sample_precision(&mean, &mut rng);
        for h in 0..sc.p_m {
            m[(i, h)] = draw[h];
        }
    }
    use rand::Rng as _;
    let y_mask: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..p_y).map(|_| rng.random::<f64>() < sc.missing_rate_y).collect())
        .collect();
    let m_mask: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..sc.p_m).map(|_| rng.random::<f64>() < sc.missing_rate_m).collect())
        .collect();

    // Long-format longitudinal file.
    let subject_id = |i: usize| format!("s{:03}", i + 1);
    let mut rows = Vec::new();
    let mut t0 = 0usize;
    for (s, times) in sc.process_times.iter().enumerate() {
        for i in 0..n {
            for (j, &time) in times.iter().enumerate() {
                let t = t0 + j;
                let value = if y_mask[i][t] { "NA".to_string() } else { format!("{}", y[(i, t)]) };
                rows.push(vec![
                    subject_id(i),
                    format!("p{}", s + 1),
                    format!("{time}"),
                    value,
                ]);
            }
        }
        t0 += times.len();
    }
    let long_path = dir.join("longitudinal.csv");
    write_csv(
        &long_path,
        &["subject_id", "process", "time", "value"].map(String::from),
        &rows,
    )?;

    let mut rows = Vec::new();
    for i in 0..n {
        let mut row = vec![subject_id(i)];
        for h in 0..sc.p_m {
            row.push(if m_mask[i][h] { "NA".to_string() } else { format!("{}", m[(i, h)]) });
        }
        rows.push(row);
    }
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..sc.p_m).map(|h| format!("met{}", h + 1)));
    let met_path = dir.join("metabolites.csv");
    write_csv(&met_path, &header, &rows)?;

    let mut rows = Vec::new();
    for i in 0..n {
        rows.push(vec![subject_id(i), format!("{}", x[i])]);
    }
    let cov_path = dir.join("covariates.csv");
    write_csv(&cov_path, &["subject_id", "x0"].map(String::from), &rows)?;

    let truth = SimTruth {
        labels: sc.labels.clone(),
        graphs: sc.graphs.iter().map(|g| g.edges()).collect(),
        omega: omegas
            .iter()
            .map(|o| (0..o.nrows()).map(|i| o.row(i).iter().copied().collect()).collect())
            .collect(),
        theta_star: sc.theta_star.iter().map(|t| t.iter().copied().collect()).collect(),
        beta_y: vec![sc.beta_y_effect; p_y],
        beta_m: vec![sc.beta_m_effect; sc.p_m],
        tau2: vec![sc.tau2; sc.process_times.len()],
        kernel_params: None,
        seed,
    };
    let truth_path = dir.join("truth.json");
    let text = serde_json::to_string_pretty(&truth)
        .map_err(|e| Error::parse("truth.json", e.to_string()))?;
    std::fs::write(&truth_path, text).map_err(|e| Error::io(truth_path.display().to_string(), e))?;

    let config = fit_config_for_simulation(sc);
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml()?)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;

    Ok(SimOutputs {
        files: vec![long_path, met_path, cov_path, truth_path, config_path.clone()],
        truth,
        config_path,
    })
}
