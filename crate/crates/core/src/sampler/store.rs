//! Streaming on-disk store for saved MCMC draws.
//!
//! One row (or JSON line) per saved iteration per file. Cluster-indexed
//! output is written in canonical label order (clusters renumbered by
//! first appearance over subjects), so `partitions.csv` labels index the
//! `clusters` arrays in `graphs.jsonl` and `theta_star.jsonl` directly.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::preprocess::ModelData;

use super::{ChainState, ModelContext};

pub const STORE_FILES: [&str; 6] = [
    "partitions.csv",
    "beta_Y.csv",
    "beta_M.csv",
    "scalars.csv",
    "graphs.jsonl",
    "theta_star.jsonl",
];

pub struct SampleStore {
    dir: PathBuf,
    partitions: csv::Writer<BufWriter<File>>,
    beta_y: csv::Writer<BufWriter<File>>,
    beta_m: csv::Writer<BufWriter<File>>,
    scalars: csv::Writer<BufWriter<File>>,
    graphs: BufWriter<File>,
    theta_star: BufWriter<File>,
    n_saved: usize,
    fixed_partition: bool,
    metabolite_names: Vec<String>,
    /// Running per-cluster sums of precision entries (fixed partitions
    /// only, where cluster identity is stable across iterations).
    omega_sums: Vec<DMatrix<f64>>,
}

fn fmt(v: f64) -> String {
    // Shortest round-trip decimal: deterministic for identical bit patterns.
    format!("{v}")
}

fn open_csv(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn open_raw(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufWriter::new(file))
}

impl SampleStore {
    pub fn create(
        dir: &Path,
        data: &ModelData,
        expected_saves: usize,
        fixed_partition: Option<usize>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut partitions = open_csv(dir, "partitions.csv")?;
        let mut header = vec!["iter".to_string()];
        header.extend(data.subject_ids.iter().cloned());
        partitions.write_record(&header).map_err(|e| Error::parse("partitions.csv", e.to_string()))?;

        let mut beta_y = open_csv(dir, "beta_Y.csv")?;
        let mut header = vec!["iter".to_string()];
        for t in 0..data.p_y() {
            for j in 0..data.q() {
                header.push(format!("beta_y_t{t}_x{j}"));
            }
        }
        beta_y.write_record(&header).map_err(|e| Error::parse("beta_Y.csv", e.to_string()))?;

        let mut beta_m = open_csv(dir, "beta_M.csv")?;
        let mut header = vec!["iter".to_string()];
        for h in 0..data.p_m() {
            for j in 0..data.q() {
                header.push(format!("beta_m_m{h}_x{j}"));
            }
        }
        beta_m.write_record(&header).map_err(|e| Error::parse("beta_M.csv", e.to_string()))?;

        let mut scalars = open_csv(dir, "scalars.csv")?;
        let mut header = vec!["iter".to_string()];
        for p in &data.processes {
            header.push(format!("tau2_{}", p.name));
        }
        header.push("sigma2".to_string());
        header.push("phi2".to_string());
        header.push("eta2".to_string());
        for p in &data.processes {
            header.push(format!("xi_{}", p.name));
        }
        header.push("n_clusters".to_string());
        header.push("loglik".to_string());
        scalars.write_record(&header).map_err(|e| Error::parse("scalars.csv", e.to_string()))?;

        let graphs = open_raw(dir, "graphs.jsonl")?;
        let theta_star = open_raw(dir, "theta_star.jsonl")?;

        let store = SampleStore {
            dir: dir.to_path_buf(),
            partitions,
            beta_y,
            beta_m,
            scalars,
            graphs,
            theta_star,
            n_saved: 0,
            fixed_partition: fixed_partition.is_some(),
            metabolite_names: data.metabolite_names.clone(),
            omega_sums: match fixed_partition {
                Some(k) => vec![DMatrix::zeros(data.p_m(), data.p_m()); k],
                None => Vec::new(),
            },
        };
        store.write_meta(data, expected_saves)?;
        Ok(store)
    }

    fn write_meta(&self, data: &ModelData, expected_saves: usize) -> Result<()> {
        let meta = serde_json::json!({
            "subject_ids": data.subject_ids,
            "processes": data.processes.iter().map(|p| {
                serde_json::json!({"name": p.name, "times": p.times})
            }).collect::<Vec<_>>(),
            "metabolite_names": data.metabolite_names,
            "covariate_names": data.covariate_names,
            "p_y": data.p_y(),
            "p_m": data.p_m(),
            "q": data.q(),
            "expected_saves": expected_saves,
            "n_saved": self.n_saved,
            "fixed_partition": self.fixed_partition,
            "files": STORE_FILES,
        });
        let path = self.dir.join("store_meta.json");
        let text = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::parse("store_meta.json", e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn n_saved(&self) -> usize {
        self.n_saved
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends the current state to every stream.
    pub fn save(&mut self, state: &ChainState, ctx: &ModelContext) -> Result<()> {
        let it = state.iteration;
        let partition = crate::dp::Partition::from_labels(state.labels.clone())?;
        let canon = partition.canonical_labels();
        let k = state.atoms.len();
        // canon_to_raw[c] = raw atom index of canonical cluster c.
        let mut canon_to_raw = vec![usize::MAX; k];
        for i in 0..canon.len() {
            canon_to_raw[canon[i]] = state.labels[i];
        }
        if canon_to_raw.iter().any(|&r| r == usize::MAX) {
            return Err(Error::Numerical(format!(
                "iteration {it}: empty cluster in partition at save time"
            )));
        }

        let mut row = vec![it.to_string()];
        row.extend(canon.iter().map(|c| c.to_string()));
        self.partitions
            .write_record(&row)
            .map_err(|e| Error::parse("partitions.csv", e.to_string()))?;

        let mut row = vec![it.to_string()];
        for t in 0..state.beta_y.nrows() {
            for j in 0..state.beta_y.ncols() {
                row.push(fmt(state.beta_y[(t, j)]));
            }
        }
        self.beta_y.write_record(&row).map_err(|e| Error::parse("beta_Y.csv", e.to_string()))?;

        let mut row = vec![it.to_string()];
        for h in 0..state.beta_m.nrows() {
            for j in 0..state.beta_m.ncols() {
                row.push(fmt(state.beta_m[(h, j)]));
            }
        }
        self.beta_m.write_record(&row).map_err(|e| Error::parse("beta_M.csv", e.to_string()))?;

        let mut row = vec![it.to_string()];
        for &t in &state.tau2 {
            row.push(fmt(t));
        }
        row.push(fmt(state.kernel.sigma2));
        row.push(fmt(state.kernel.phi2));
        row.push(fmt(state.kernel.eta2));
        for &x in &state.kernel.xi {
            row.push(fmt(x));
        }
        row.push(k.to_string());
        row.push(fmt(state.log_likelihood(ctx)));
        self.scalars.write_record(&row).map_err(|e| Error::parse("scalars.csv", e.to_string()))?;

        let clusters: Vec<serde_json::Value> = canon_to_raw
            .iter()
            .map(|&r| serde_json::json!({ "edges": state.atoms[r].graph.edges() }))
            .collect();
        let line = serde_json::json!({ "iter": it, "clusters": clusters });
        writeln!(self.graphs, "{line}").map_err(|e| Error::io("graphs.jsonl", e))?;

        let atoms: Vec<Vec<f64>> = canon_to_raw
            .iter()
            .map(|&r| state.atoms[r].theta.iter().copied().collect())
            .collect();
        let line = serde_json::json!({
            "iter": it,
            "mu_theta": state.mu_theta.iter().copied().collect::<Vec<f64>>(),
            "atoms": atoms,
        });
        writeln!(self.theta_star, "{line}").map_err(|e| Error::io("theta_star.jsonl", e))?;

        if self.fixed_partition {
            if self.omega_sums.len() != k {
                return Err(Error::Numerical(format!(
                    "iteration {it}: fixed partition changed cluster count"
                )));
            }
            for (c, &r) in canon_to_raw.iter().enumerate() {
                self.omega_sums[c] += state.atoms[r].omega.matrix();
            }
        }
        self.n_saved += 1;
        Ok(())
    }

    /// Flushes everything and writes the closing metadata (plus per-cluster
    /// posterior-mean precisions for fixed-partition runs). Returns the
    /// paths written.
    pub fn finish(mut self, data: &ModelData, expected_saves: usize) -> Result<Vec<PathBuf>> {
        self.partitions.flush().map_err(|e| Error::io("partitions.csv", e))?;
        self.beta_y.flush().map_err(|e| Error::io("beta_Y.csv", e))?;
        self.beta_m.flush().map_err(|e| Error::io("beta_M.csv", e))?;
        self.scalars.flush().map_err(|e| Error::io("scalars.csv", e))?;
        self.graphs.flush().map_err(|e| Error::io("graphs.jsonl", e))?;
        self.theta_star.flush().map_err(|e| Error::io("theta_star.jsonl", e))?;
        let mut files: Vec<PathBuf> = STORE_FILES.iter().map(|f| self.dir.join(f)).collect();
        if self.fixed_partition && self.n_saved > 0 {
            for (c, sum) in self.omega_sums.iter().enumerate() {
                let path = self.dir.join(format!("omega_mean_cluster{c}.csv"));
                let mut w = open_csv(&self.dir, &format!("omega_mean_cluster{c}.csv"))?;
                w.write_record(&self.metabolite_names)
                    .map_err(|e| Error::parse("omega mean header", e.to_string()))?;
                let mean = sum / self.n_saved as f64;
                for i in 0..mean.nrows() {
                    let row: Vec<String> = (0..mean.ncols()).map(|j| fmt(mean[(i, j)])).collect();
                    w.write_record(&row)
                        .map_err(|e| Error::parse("omega mean row", e.to_string()))?;
                }
                w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
                files.push(path);
            }
        }
        self.write_meta(data, expected_saves)?;
        files.push(self.dir.join("store_meta.json"));
        Ok(files)
    }
}
