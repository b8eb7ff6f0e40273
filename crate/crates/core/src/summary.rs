//! Posterior summaries computed from an on-disk sample store:
//! co-clustering frequencies, the Binder point-estimate partition,
//! per-cluster edge probabilities / median graphs / differential
//! networks, coefficient credible intervals, and cluster mean
//! trajectories.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ggm::Graph;

pub const MEDIAN_GRAPH_THRESHOLD: f64 = 0.5;
pub const DIFFNET_THRESHOLD: f64 = 0.9;
pub const INTERVAL_LEVEL: f64 = 0.95;

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Clone, Deserialize)]
pub struct StoreProcess {
    pub name: String,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StoreMeta {
    pub subject_ids: Vec<String>,
    pub processes: Vec<StoreProcess>,
    pub metabolite_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub p_y: usize,
    pub p_m: usize,
    pub q: usize,
    pub expected_saves: usize,
    pub n_saved: usize,
    pub fixed_partition: bool,
}

#[derive(Debug, Clone, Deserialize)]
struct GraphsRecord {
    #[allow(dead_code)]
    iter: usize,
    clusters: Vec<ClusterEdges>,
}

#[derive(Debug, Clone, Deserialize)]
struct ClusterEdges {
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct ThetaRecord {
    pub iter: usize,
    pub mu_theta: Vec<f64>,
    pub atoms: Vec<Vec<f64>>,
}

/// Every saved draw, fully materialized.
#[derive(Debug, Clone)]
pub struct LoadedSamples {
    pub meta: StoreMeta,
    pub iters: Vec<usize>,
    pub partitions: Vec<Vec<usize>>,
    /// Row-major per save: beta_y[s] is the flattened p_Y x q matrix in
    /// (coordinate-major, covariate-minor) column order of the CSV.
    pub beta_y: Vec<Vec<f64>>,
    pub beta_m: Vec<Vec<f64>>,
    pub scalar_names: Vec<String>,
    pub scalars: Vec<Vec<f64>>,
    /// graphs[s][c] = edge list of cluster c (canonical order) at save s.
    pub graphs: Vec<Vec<Vec<(usize, usize)>>>,
    pub theta: Vec<ThetaRecord>,
}

fn read_csv_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, field: &str) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        Error::parse(path.display().to_string(), format!("expected a number, got {field:?}"))
    })
}

fn parse_usize(path: &Path, field: &str) -> Result<usize> {
    field.parse::<usize>().map_err(|_| {
        Error::parse(path.display().to_string(), format!("expected an integer, got {field:?}"))
    })
}

/// Reads a complete sample store from `dir`, checking that all files are
/// present and carry exactly the saved-draw count recorded in the
/// metadata.
pub fn load_samples(dir: &Path) -> Result<LoadedSamples> {
    let required = [
        "store_meta.json",
        "partitions.csv",
        "beta_Y.csv",
        "beta_M.csv",
        "scalars.csv",
        "graphs.jsonl",
        "theta_star.jsonl",
    ];
    let missing: Vec<&str> =
        required.iter().copied().filter(|f| !dir.join(f).exists()).collect();
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample store at {} is incomplete; missing: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let meta_path = dir.join("store_meta.json");
    let meta_text = std::fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    let meta: StoreMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?;

    let parts_path = dir.join("partitions.csv");
    let (_, part_rows) = read_csv_table(&parts_path)?;
    let mut iters = Vec::with_capacity(part_rows.len());
    let mut partitions = Vec::with_capacity(part_rows.len());
    for row in &part_rows {
        iters.push(parse_usize(&parts_path, &row[0])?);
        let labels: Result<Vec<usize>> =
            row[1..].iter().map(|f| parse_usize(&parts_path, f)).collect();
        partitions.push(labels?);
    }

    let read_matrix_csv = |name: &str| -> Result<Vec<Vec<f64>>> {
        let path = dir.join(name);
        let (_, rows) = read_csv_table(&path)?;
        rows.iter()
            .map(|row| row[1..].iter().map(|f| parse_f64(&path, f)).collect())
            .collect()
    };
    let beta_y = read_matrix_csv("beta_Y.csv")?;
    let beta_m = read_matrix_csv("beta_M.csv")?;

    let scalars_path = dir.join("scalars.csv");
    let (scalar_header, scalar_rows) = read_csv_table(&scalars_path)?;
    let scalar_names: Vec<String> = scalar_header[1..].to_vec();
    let scalars: Result<Vec<Vec<f64>>> = scalar_rows
        .iter()
        .map(|row| row[1..].iter().map(|f| parse_f64(&scalars_path, f)).collect())
        .collect();
    let scalars = scalars?;

    let graphs_path = dir.join("graphs.jsonl");
    let file = std::fs::File::open(&graphs_path)
        .map_err(|e| Error::io(graphs_path.display().to_string(), e))?;
    let mut graphs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(graphs_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(graphs_path.display().to_string(), e.to_string()))?;
        graphs.push(record.clusters.into_iter().map(|c| c.edges).collect());
    }

    let theta_path = dir.join("theta_star.jsonl");
    let file = std::fs::File::open(&theta_path)
        .map_err(|e| Error::io(theta_path.display().to_string(), e))?;
    let mut theta = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(theta_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ThetaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(theta_path.display().to_string(), e.to_string()))?;
        theta.push(record);
    }

    let n = meta.n_saved;
    let counts = [
        ("partitions.csv", partitions.len()),
        ("beta_Y.csv", beta_y.len()),
        ("beta_M.csv", beta_m.len()),
        ("scalars.csv", scalars.len()),
        ("graphs.jsonl", graphs.len()),
        ("theta_star.jsonl", theta.len()),
    ];
    let truncated: Vec<String> = counts
        .iter()
        .filter(|(_, c)| *c != n)
        .map(|(f, c)| format!("{f} has {c} rows, expected {n}"))
        .collect();
    if !truncated.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "sample store at {} is truncated: {}",
            dir.display(),
            truncated.join("; ")
        )));
    }
    Ok(LoadedSamples {
        meta,
        iters,
        partitions,
        beta_y,
        beta_m,
        scalar_names,
        scalars,
        graphs,
        theta,
    })
}

// ---------------------------------------------------------------------------
// Partition summaries

/// Pairwise same-cluster frequencies: symmetric, unit diagonal.
pub fn coclustering(partitions: &[Vec<usize>]) -> Result<DMatrix<f64>> {
    if partitions.is_empty() {
        return Err(Error::InvalidArgument("no partition samples".to_string()));
    }
    let n = partitions[0].len();
    let mut p = DMatrix::zeros(n, n);
    for labels in partitions {
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "partition sample with {} labels, expected {n}",
                labels.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] {
                    p[(i, j)] += 1.0;
                }
            }
        }
    }
    p /= partitions.len() as f64;
    for i in 0..n {
        p[(i, i)] = 1.0;
        for j in 0..i {
            p[(i, j)] = p[(j, i)];
        }
    }
    Ok(p)
}

/// Posterior expected Binder loss of one candidate partition under
/// pairwise co-clustering probabilities (equal unit misclassification
/// costs): sum over pairs of |1{same} - P[i][j]|.
pub fn binder_loss(labels: &[usize], coclust: &DMatrix<f64>) -> f64 {
    let n = labels.len();
    let mut loss = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let same = if labels[i] == labels[j] { 1.0 } else { 0.0 };
            loss += (same - coclust[(i, j)]).abs();
        }
    }
    loss
}

/// The sampled partition minimizing the expected Binder loss; ties break
/// toward the earliest sample. Returns (sample index, labels, loss).
pub fn binder_partition(
    partitions: &[Vec<usize>],
    coclust: &DMatrix<f64>,
) -> Result<(usize, Vec<usize>, f64)> {
    if partitions.is_empty() {
        return Err(Error::InvalidArgument("no partition samples".to_string()));
    }
    let mut best = 0;
    let mut best_loss = f64::INFINITY;
    for (s, labels) in partitions.iter().enumerate() {
        let loss = binder_loss(labels, coclust);
        if loss < best_loss {
            best_loss = loss;
            best = s;
        }
    }
    Ok((best, partitions[best].clone(), best_loss))
}

// ---------------------------------------------------------------------------
// Graph summaries

/// Per-edge inclusion frequencies for one cluster's graph draws.
pub fn edge_probabilities(edge_lists: &[Vec<(usize, usize)>], p: usize) -> Result<DMatrix<f64>> {
    if edge_lists.is_empty() {
        return Err(Error::InvalidArgument("no graph samples".to_string()));
    }
    let mut probs = DMatrix::zeros(p, p);
    for edges in edge_lists {
        for &(h, k) in edges {
            if h >= p || k >= p {
                return Err(Error::InvalidArgument(format!(
                    "edge ({h}, {k}) out of range for {p} nodes"
                )));
            }
            probs[(h, k)] += 1.0;
            probs[(k, h)] += 1.0;
        }
    }
    probs /= edge_lists.len() as f64;
    Ok(probs)
}

/// Graph of edges whose probability strictly exceeds `threshold`.
pub fn graph_at_threshold(probs: &DMatrix<f64>, threshold: f64) -> Result<Graph> {
    let p = probs.nrows();
    let mut edges = Vec::new();
    for h in 0..p {
        for k in (h + 1)..p {
            if probs[(h, k)] > threshold {
                edges.push((h, k));
            }
        }
    }
    Graph::from_edges(p, &edges)
}

/// Median graph: edges with inclusion probability strictly above 1/2.
pub fn median_graph(probs: &DMatrix<f64>) -> Result<Graph> {
    graph_at_threshold(probs, MEDIAN_GRAPH_THRESHOLD)
}

/// Edges whose inclusion probabilities differ strictly by more than
/// `threshold` between two clusters.
pub fn differential_network(
    probs1: &DMatrix<f64>,
    probs2: &DMatrix<f64>,
    threshold: f64,
) -> Result<Graph> {
    if probs1.shape() != probs2.shape() {
        return Err(Error::InvalidArgument(format!(
            "edge probability matrices have different shapes: {:?} vs {:?}",
            probs1.shape(),
            probs2.shape()
        )));
    }
    // 1.0 is allowed and always yields an empty graph (probabilities cannot
    // strictly exceed it); values above 1 or at/below 0 are mistakes.
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "differential threshold must lie in (0, 1], got {threshold}"
        )));
    }
    let diff = (probs1 - probs2).abs();
    graph_at_threshold(&diff, threshold)
}

// ---------------------------------------------------------------------------
// Coefficient intervals

#[derive(Debug, Clone)]
pub struct CoefficientInterval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Interval excludes zero.
    pub relevant: bool,
}

/// Linear-interpolation sample quantile at probability `p`.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = p * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let w = rank - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Equal-tailed credible interval per coefficient column.
pub fn coefficient_intervals(samples: &[Vec<f64>], level: f64) -> Result<Vec<CoefficientInterval>> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 draws for an interval, got {}",
            samples.len()
        )));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "interval level must lie in (0, 1], got {level}"
        )));
    }
    let n_coef = samples[0].len();
    let n = samples.len();
    let mut out = Vec::with_capacity(n_coef);
    for c in 0..n_coef {
        let mut column: Vec<f64> = samples.iter().map(|row| row[c]).collect();
        column.sort_by(|a, b| a.partial_cmp(b).expect("draws must be finite"));
        let mean = column.iter().sum::<f64>() / n as f64;
        let lo = quantile(&column, (1.0 - level) / 2.0);
        let hi = quantile(&column, (1.0 + level) / 2.0);
        out.push(CoefficientInterval { mean, lo, hi, relevant: lo > 0.0 || hi < 0.0 });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories

#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub cluster: usize,
    pub process: String,
    pub time: f64,
    pub mean: f64,
}

/// Posterior mean trajectory per cluster, split back into the process
/// segments. Requires a store whose saved partitions are all identical.
pub fn cluster_trajectories(samples: &LoadedSamples) -> Result<Vec<TrajectoryPoint>> {
    let k = constant_partition_clusters(samples).ok_or_else(|| {
        Error::InvalidArgument(
            "cluster trajectories need a fixed-partition store \
             (saved partitions are not all identical)"
                .to_string(),
        )
    })?;
    let p_y = samples.meta.p_y;
    let mut sums = vec![vec![0.0; p_y]; k];
    for record in &samples.theta {
        if record.atoms.len() != k {
            return Err(Error::InvalidArgument(format!(
                "theta draw at iteration {} has {} clusters, expected {k}",
                record.iter,
                record.atoms.len()
            )));
        }
        for (c, atom) in record.atoms.iter().enumerate() {
            for t in 0..p_y {
                sums[c][t] += atom[t];
            }
        }
    }
    let n = samples.theta.len() as f64;
    let mut out = Vec::new();
    for (c, sum) in sums.iter().enumerate() {
        let mut t = 0usize;
        for process in &samples.meta.processes {
            for &time in &process.times {
                out.push(TrajectoryPoint {
                    cluster: c,
                    process: process.name.clone(),
                    time,
                    mean: sum[t] / n,
                });
                t += 1;
            }
        }
    }
    Ok(out)
}

/// Number of clusters when every saved partition is the same, else None.
pub fn constant_partition_clusters(samples: &LoadedSamples) -> Option<usize> {
    let first = samples.partitions.first()?;
    if samples.partitions.iter().all(|p| p == first) {
        Some(first.iter().copied().max().map_or(0, |m| m + 1))
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Driver: compute everything and write the output files

#[derive(Debug, Clone)]
pub struct SummaryOutputs {
    pub files: Vec<PathBuf>,
    pub binder_labels: Vec<usize>,
    pub binder_loss: f64,
    pub n_clusters: Option<usize>,
}

fn write_matrix_csv(
    path: &Path,
    col_names: &[String],
    row_names: Option<&[String]>,
    m: &DMatrix<f64>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e.to_string())))?;
    let mut header: Vec<String> = Vec::new();
    if row_names.is_some() {
        header.push("id".to_string());
    }
    header.extend(col_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    for i in 0..m.nrows() {
        let mut row: Vec<String> = Vec::new();
        if let Some(names) = row_names {
            row.push(names[i].clone());
        }
        row.extend((0..m.ncols()).map(|j| format!("{}", m[(i, j)])));
        w.write_record(&row).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

fn beta_column_names(samples: &LoadedSamples) -> (Vec<(String, String)>, Vec<(String, String)>) {
    let meta = &samples.meta;
    let mut y_names = Vec::new();
    let mut coord_names = Vec::new();
    for process in &meta.processes {
        for &time in &process.times {
            coord_names.push(format!("{}@{}", process.name, time));
        }
    }
    for coord in &coord_names {
        for cov in &meta.covariate_names {
            y_names.push((coord.clone(), cov.clone()));
        }
    }
    let mut m_names = Vec::new();
    for met in &meta.metabolite_names {
        for cov in &meta.covariate_names {
            m_names.push((met.clone(), cov.clone()));
        }
    }
    (y_names, m_names)
}

fn write_diffnet_json(
    out_dir: &Path,
    net: &Graph,
    names: &[String],
    threshold: f64,
    c1: usize,
    c2: usize,
) -> Result<PathBuf> {
    let path = out_dir.join(format!("diffnet_{c1}_{c2}.json"));
    let mut value = net.to_json(names);
    value["threshold"] = serde_json::json!(threshold);
    value["clusters"] = serde_json::json!([c1, c2]);
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| Error::parse("differential network", e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

/// Differential network for a single cluster pair, written to
/// `diffnet_<c1>_<c2>.json`. Requires a constant saved partition, since
/// cluster identities are not comparable across differing partitions.
pub fn diffnet_pair(
    dir: &Path,
    out_dir: &Path,
    c1: usize,
    c2: usize,
    threshold: f64,
) -> Result<PathBuf> {
    let samples = load_samples(dir)?;
    let k = constant_partition_clusters(&samples).ok_or_else(|| {
        Error::InvalidArgument(
            "differential networks need a constant partition across saved draws; \
             refit with a fixed partition first"
                .to_string(),
        )
    })?;
    if c1 == c2 {
        return Err(Error::InvalidArgument(format!(
            "differential network needs two distinct clusters, got {c1} and {c2}"
        )));
    }
    for c in [c1, c2] {
        if c >= k {
            return Err(Error::InvalidArgument(format!(
                "cluster {c} out of range: the store has {k} clusters"
            )));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let probs_for = |c: usize| -> Result<DMatrix<f64>> {
        let edge_lists: Vec<Vec<(usize, usize)>> =
            samples.graphs.iter().map(|g| g[c].clone()).collect();
        edge_probabilities(&edge_lists, samples.meta.p_m)
    };
    let net = differential_network(&probs_for(c1)?, &probs_for(c2)?, threshold)?;
    write_diffnet_json(out_dir, &net, &samples.meta.metabolite_names, threshold, c1, c2)
}

/// Computes every applicable summary from the store in `dir` and writes
/// the output files next to it (or into `out_dir`). Per-cluster outputs
/// (edge probabilities, median graphs, differential networks,
/// trajectories) are written only when all saved partitions agree, since
/// cluster identities are not comparable across differing partitions.
pub fn summarize_store(
    dir: &Path,
    out_dir: &Path,
    diffnet_threshold: f64,
) -> Result<SummaryOutputs> {
    let samples = load_samples(dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut files = Vec::new();

    let coclust = coclustering(&samples.partitions)?;
    let path = out_dir.join("coclustering.csv");
    write_matrix_csv(&path, &samples.meta.subject_ids, Some(&samples.meta.subject_ids), &coclust)?;
    files.push(path);

    let (best_idx, binder_labels, loss) = binder_partition(&samples.partitions, &coclust)?;
    let path = out_dir.join("binder_partition.csv");
    {
        let mut w = csv::Writer::from_path(&path).map_err(|e| {
            Error::io(path.display().to_string(), std::io::Error::other(e.to_string()))
        })?;
        w.write_record(["subject", "cluster"])
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        for (id, c) in samples.meta.subject_ids.iter().zip(&binder_labels) {
            w.write_record([id.as_str(), &c.to_string()])
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    files.push(path);
    let _ = best_idx;

    // Coefficient intervals for both blocks in one table.
    let path = out_dir.join("beta_intervals.csv");
    {
        let (y_names, m_names) = beta_column_names(&samples);
        let mut w = csv::Writer::from_path(&path).map_err(|e| {
            Error::io(path.display().to_string(), std::io::Error::other(e.to_string()))
        })?;
        w.write_record(["block", "target", "covariate", "mean", "lo", "hi", "relevant"])
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        let mut write_block = |block: &str,
                               names: &[(String, String)],
                               draws: &[Vec<f64>]|
         -> Result<()> {
            if draws.is_empty() || draws[0].is_empty() {
                return Ok(());
            }
            let intervals = coefficient_intervals(draws, INTERVAL_LEVEL)?;
            for (name, ci) in names.iter().zip(intervals.iter()) {
                w.write_record([
                    block,
                    &name.0,
                    &name.1,
                    &format!("{}", ci.mean),
                    &format!("{}", ci.lo),
                    &format!("{}", ci.hi),
                    &ci.relevant.to_string(),
                ])
                .map_err(|e| Error::parse("beta_intervals.csv", e.to_string()))?;
            }
            Ok(())
        };
        write_block("Y", &y_names, &samples.beta_y)?;
        write_block("M", &m_names, &samples.beta_m)?;
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    files.push(path);

    let n_clusters = constant_partition_clusters(&samples);
    if let Some(k) = n_clusters {
        let mut probs_per_cluster = Vec::with_capacity(k);
        for c in 0..k {
            let edge_lists: Vec<Vec<(usize, usize)>> =
                samples.graphs.iter().map(|g| g[c].clone()).collect();
            let probs = edge_probabilities(&edge_lists, samples.meta.p_m)?;
            let path = out_dir.join(format!("edge_probs_cluster{c}.csv"));
            write_matrix_csv(&path, &samples.meta.metabolite_names, None, &probs)?;
            files.push(path);

            let median = median_graph(&probs)?;
            let path = out_dir.join(format!("median_graph_cluster{c}.json"));
            let text = serde_json::to_string_pretty(&median.to_json(&samples.meta.metabolite_names))
                .map_err(|e| Error::parse("median graph", e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
            files.push(path);
            probs_per_cluster.push(probs);
        }
        for c1 in 0..k {
            for c2 in (c1 + 1)..k {
                let net = differential_network(
                    &probs_per_cluster[c1],
                    &probs_per_cluster[c2],
                    diffnet_threshold,
                )?;
                let path = write_diffnet_json(
                    out_dir,
                    &net,
                    &samples.meta.metabolite_names,
                    diffnet_threshold,
                    c1,
                    c2,
                )?;
                files.push(path);
            }
        }
        if samples.meta.p_y > 0 {
            let trajectories = cluster_trajectories(&samples)?;
            let path = out_dir.join("trajectories.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| {
                Error::io(path.display().to_string(), std::io::Error::other(e.to_string()))
            })?;
            w.write_record(["cluster", "process", "time", "mean"])
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
            for point in &trajectories {
                w.write_record([
                    point.cluster.to_string(),
                    point.process.clone(),
                    format!("{}", point.time),
                    format!("{}", point.mean),
                ])
                .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
            }
            w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
            files.push(path);
        }
    }

    Ok(SummaryOutputs { files, binder_labels, binder_loss: loss, n_clusters })
}

/// Mean of each scalar column, keyed by name (chain diagnostics).
pub fn scalar_means(samples: &LoadedSamples) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let n = samples.scalars.len().max(1) as f64;
    for (j, name) in samples.scalar_names.iter().enumerate() {
        let sum: f64 = samples.scalars.iter().map(|row| row[j]).sum();
        out.insert(name.clone(), sum / n);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::enumerate_partitions;
    use crate::rng::substream;
    use proptest::prelude::*;

    #[test]
    fn coclustering_identical_samples_is_binary() {
        let parts = vec![vec![0, 0, 1, 1]; 7];
        let p = coclustering(&parts).unwrap();
        assert_eq!(p[(0, 1)], 1.0);
        assert_eq!(p[(0, 2)], 0.0);
        assert_eq!(p[(2, 3)], 1.0);
        for i in 0..4 {
            assert_eq!(p[(i, i)], 1.0);
        }
    }

    #[test]
    fn coclustering_half_split_gives_half() {
        let parts = vec![vec![0, 0, 1], vec![0, 1, 1]];
        let p = coclustering(&parts).unwrap();
        assert_eq!(p[(0, 1)], 0.5);
        assert_eq!(p[(1, 2)], 0.5);
        assert_eq!(p[(0, 2)], 0.0);
    }

    #[test]
    fn coclustering_matches_direct_count_oracle() {
        let mut rng = substream(3, "coclust-oracle", 0);
        let n = 6;
        let parts: Vec<Vec<usize>> =
            (0..40).map(|_| (0..n).map(|_| rng.random_range(0..3usize)).collect()).collect();
        let p = coclustering(&parts).unwrap();
        for i in 0..n {
            for j in 0..n {
                let count =
                    parts.iter().filter(|labels| labels[i] == labels[j]).count() as f64;
                let expect = count / parts.len() as f64;
                assert!((p[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binder_identical_samples_returns_that_partition() {
        let parts = vec![vec![0, 1, 0]; 3];
        let coclust = coclustering(&parts).unwrap();
        let (idx, labels, loss) = binder_partition(&parts, &coclust).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(labels, vec![0, 1, 0]);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn binder_beats_every_sampled_partition_and_bounds_global_minimum() {
        // N = 8 random sample sets; exhaustive check against all 4140
        // partitions of 8 items.
        let all = enumerate_partitions(8);
        assert_eq!(all.len(), 4140);
        let mut rng = substream(4, "binder-brute", 0);
        for trial in 0..5 {
            let parts: Vec<Vec<usize>> = (0..30)
                .map(|_| all[rng.random_range(0..all.len())].clone())
                .collect();
            let coclust = coclustering(&parts).unwrap();
            let (_, best, best_loss) = binder_partition(&parts, &coclust).unwrap();
            for labels in &parts {
                assert!(binder_loss(labels, &coclust) >= best_loss - 1e-12);
            }
            let global_min = all
                .iter()
                .map(|labels| binder_loss(labels, &coclust))
                .fold(f64::INFINITY, f64::min);
            assert!(
                best_loss >= global_min - 1e-12,
                "trial {trial}: sampled minimum {best_loss} below global {global_min}"
            );
            // When the global minimizer is among the samples the two agree.
            let global_best = all
                .iter()
                .min_by(|a, b| {
                    binder_loss(a, &coclust).partial_cmp(&binder_loss(b, &coclust)).unwrap()
                })
                .unwrap();
            let mut with_global = parts.clone();
            with_global.push(global_best.clone());
            let (_, _, loss_with) = binder_partition(&with_global, &coclust).unwrap();
            assert!((loss_with - global_min).abs() < 1e-12);
            let _ = best;
        }
    }

    #[test]
    fn binder_tie_breaks_to_earliest_sample() {
        // Two equally-bad partitions around a symmetric coclustering.
        let parts = vec![vec![0, 0, 1], vec![0, 1, 0]];
        let coclust = coclustering(&parts).unwrap();
        let l0 = binder_loss(&parts[0], &coclust);
        let l1 = binder_loss(&parts[1], &coclust);
        assert_eq!(l0, l1);
        let (idx, _, _) = binder_partition(&parts, &coclust).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn median_graph_uses_strict_threshold() {
        let mut probs = DMatrix::zeros(3, 3);
        probs[(0, 1)] = 0.6;
        probs[(1, 0)] = 0.6;
        probs[(0, 2)] = 0.5;
        probs[(2, 0)] = 0.5;
        probs[(1, 2)] = 0.4;
        probs[(2, 1)] = 0.4;
        let g = median_graph(&probs).unwrap();
        assert!(g.has_edge(0, 1));
        assert!(!g.has_edge(0, 2), "probability exactly 0.5 must be excluded");
        assert!(!g.has_edge(1, 2));
    }

    #[test]
    fn differential_network_rule_and_errors() {
        let mut p1 = DMatrix::zeros(2, 2);
        let mut p2 = DMatrix::zeros(2, 2);
        p1[(0, 1)] = 0.95;
        p1[(1, 0)] = 0.95;
        p2[(0, 1)] = 0.02;
        p2[(1, 0)] = 0.02;
        let g = differential_network(&p1, &p2, 0.9).unwrap();
        assert!(g.has_edge(0, 1), "diff 0.93 exceeds 0.9");
        p2[(0, 1)] = 0.10;
        p2[(1, 0)] = 0.10;
        let g = differential_network(&p1, &p2, 0.9).unwrap();
        assert!(!g.has_edge(0, 1), "diff 0.85 is below 0.9");
        let g = differential_network(&p1, &p1, 0.9).unwrap();
        assert_eq!(g.n_edges(), 0);
        let p3 = DMatrix::zeros(3, 3);
        assert!(differential_network(&p1, &p3, 0.9).is_err());
        // Threshold 1.0 is legal and can never be strictly exceeded.
        let g = differential_network(&p1, &p2, 1.0).unwrap();
        assert_eq!(g.n_edges(), 0);
        assert!(differential_network(&p1, &p2, 1.2).is_err());
        assert!(differential_network(&p1, &p2, 0.0).is_err());
    }

    #[test]
    fn interval_flags_and_oracle() {
        // All-positive draws are relevant, symmetric ones are not.
        let positive: Vec<Vec<f64>> = (0..100).map(|i| vec![1.0 + 0.001 * i as f64]).collect();
        let ci = coefficient_intervals(&positive, 0.95).unwrap();
        assert!(ci[0].relevant);
        let symmetric: Vec<Vec<f64>> =
            (0..100).map(|i| vec![(i as f64 - 49.5) / 10.0]).collect();
        let ci = coefficient_intervals(&symmetric, 0.95).unwrap();
        assert!(!ci[0].relevant);
        // Quantiles match an independent sort-based computation.
        let mut rng = substream(5, "interval-oracle", 0);
        let draws: Vec<Vec<f64>> = (0..501).map(|_| vec![rng.random::<f64>() * 4.0 - 2.0]).collect();
        let ci = coefficient_intervals(&draws, 0.9).unwrap();
        let mut sorted: Vec<f64> = draws.iter().map(|r| r[0]).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle = |p: f64| -> f64 {
            let rank = p * (sorted.len() - 1) as f64;
            let lo = rank.floor() as usize;
            let w = rank - lo as f64;
            if lo + 1 < sorted.len() {
                sorted[lo] * (1.0 - w) + sorted[lo + 1] * w
            } else {
                sorted[lo]
            }
        };
        assert!((ci[0].lo - oracle(0.05)).abs() < 1e-12);
        assert!((ci[0].hi - oracle(0.95)).abs() < 1e-12);
    }

    #[test]
    fn interval_level_limits() {
        let draws: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64]).collect();
        let full = coefficient_intervals(&draws, 1.0).unwrap();
        assert_eq!(full[0].lo, 0.0);
        assert_eq!(full[0].hi, 8.0);
        let tiny = coefficient_intervals(&draws, 1e-9).unwrap();
        assert!((tiny[0].lo - 4.0).abs() < 1e-6, "level to 0 collapses to the median");
        assert!((tiny[0].hi - 4.0).abs() < 1e-6);
        assert!(coefficient_intervals(&draws[..1], 0.95).is_err());
    }

    proptest! {
        #[test]
        fn thresholded_graphs_are_monotone(seed in 0u64..500, t1 in 0.05f64..0.95, t2 in 0.05f64..0.95) {
            let mut rng = substream(seed, "monotone", 0);
            let p = 5;
            let mut probs = DMatrix::zeros(p, p);
            for h in 0..p {
                for k in (h + 1)..p {
                    let v: f64 = rng.random();
                    probs[(h, k)] = v;
                    probs[(k, h)] = v;
                }
            }
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let g_lo = graph_at_threshold(&probs, lo).unwrap();
            let g_hi = graph_at_threshold(&probs, hi).unwrap();
            for (h, k) in g_hi.edges() {
                prop_assert!(g_lo.has_edge(h, k), "raising the threshold added edge ({h},{k})");
            }
        }

        #[test]
        fn coclustering_entries_valid(seed in 0u64..500) {
            let mut rng = substream(seed, "coclust-range", 0);
            let n = 5;
            let parts: Vec<Vec<usize>> = (0..12)
                .map(|_| (0..n).map(|_| rng.random_range(0..3usize)).collect())
                .collect();
            let p = coclustering(&parts).unwrap();
            for i in 0..n {
                prop_assert_eq!(p[(i, i)], 1.0);
                for j in 0..n {
                    prop_assert!((0.0..=1.0).contains(&p[(i, j)]));
                    prop_assert_eq!(p[(i, j)], p[(j, i)]);
                }
            }
        }
    }

    #[test]
    fn trajectories_average_theta_draws() {
        let meta = StoreMeta {
            subject_ids: vec!["a".into(), "b".into()],
            processes: vec![
                StoreProcess { name: "u".into(), times: vec![0.0, 1.0] },
                StoreProcess { name: "v".into(), times: vec![2.0] },
            ],
            metabolite_names: vec!["m0".into()],
            covariate_names: vec![],
            p_y: 3,
            p_m: 1,
            q: 0,
            expected_saves: 2,
            n_saved: 2,
            fixed_partition: true,
        };
        let samples = LoadedSamples {
            meta,
            iters: vec![1, 2],
            partitions: vec![vec![0, 1], vec![0, 1]],
            beta_y: vec![vec![], vec![]],
            beta_m: vec![vec![], vec![]],
            scalar_names: vec![],
            scalars: vec![vec![], vec![]],
            graphs: vec![vec![vec![], vec![]], vec![vec![], vec![]]],
            theta: vec![
                ThetaRecord {
                    iter: 1,
                    mu_theta: vec![0.0; 3],
                    atoms: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 1.0]],
                },
                ThetaRecord {
                    iter: 2,
                    mu_theta: vec![0.0; 3],
                    atoms: vec![vec![3.0, 4.0, 5.0], vec![1.0, 2.0, 3.0]],
                },
            ],
        };
        let points = cluster_trajectories(&samples).unwrap();
        assert_eq!(points.len(), 6);
        assert_eq!(points[0].mean, 2.0); // cluster 0, process u, t=0
        assert_eq!(points[2].process, "v");
        assert_eq!(points[2].time, 2.0);
        assert_eq!(points[2].mean, 4.0);
        assert_eq!(points[3].mean, 0.0); // cluster 1 starts
        // Mixed partitions refuse per-cluster summaries.
        let mut mixed = samples.clone();
        mixed.partitions[1] = vec![0, 0];
        assert!(cluster_trajectories(&mixed).is_err());
    }
}
