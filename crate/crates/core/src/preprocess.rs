//! Data ingestion and deterministic preprocessing.
//!
//! Input is three CSV files: long-format longitudinal responses
//! (subject_id, process, time, value), a wide metabolite matrix and a wide
//! covariate matrix. Output is a model-ready dataset on the transformed
//! scale plus a record of every transform so fits can be mapped back.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Box-Cox exponents are searched over this grid.
const BOX_COX_GRID_MIN: f64 = -2.0;
const BOX_COX_GRID_STEP: f64 = 0.1;
const BOX_COX_GRID_LEN: usize = 41;

/// Marker strings treated as missing values in any CSV cell.
const NA_STRINGS: [&str; 4] = ["", "NA", "na", "NaN"];

pub fn is_na(cell: &str) -> bool {
    NA_STRINGS.contains(&cell.trim())
}

/// log(p / (1 - p)); defined only on the open unit interval.
pub fn logit(p: f64) -> Option<f64> {
    if p > 0.0 && p < 1.0 {
        Some((p / (1.0 - p)).ln())
    } else {
        None
    }
}

pub fn inv_logit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Box-Cox transform (x^lambda - 1) / lambda, with the log limit at
/// lambda = 0. Defined only for x > 0.
pub fn box_cox(x: f64, lambda: f64) -> Option<f64> {
    if x <= 0.0 {
        return None;
    }
    if lambda == 0.0 {
        Some(x.ln())
    } else {
        Some((x.powf(lambda) - 1.0) / lambda)
    }
}

pub fn inv_box_cox(z: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        z.exp()
    } else {
        (lambda * z + 1.0).powf(1.0 / lambda)
    }
}

/// Profile-likelihood fit of the Box-Cox exponent over the grid
/// -2.0, -1.9, ..., 2.0. Ties break toward the smaller exponent.
///
/// The profiled Gaussian log likelihood is
/// -n/2 log(sigma_hat^2(lambda)) + (lambda - 1) sum(log x), the second term
/// being the Jacobian of the transform.
pub fn fit_box_cox(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "box-cox fit needs at least 3 values, got {}",
            values.len()
        )));
    }
    if let Some(bad) = values.iter().find(|v| **v <= 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "box-cox fit requires positive finite values, got {bad}"
        )));
    }
    let n = values.len() as f64;
    let log_sum: f64 = values.iter().map(|v| v.ln()).sum();
    let mut best: Option<(f64, f64)> = None;
    for i in 0..BOX_COX_GRID_LEN {
        let lambda = BOX_COX_GRID_MIN + BOX_COX_GRID_STEP * i as f64;
        // Snap the accumulated grid value so lambda = 0 is exact.
        let lambda = (lambda * 10.0).round() / 10.0;
        let transformed: Vec<f64> = values
            .iter()
            .map(|&v| box_cox(v, lambda).expect("validated positive"))
            .collect();
        let mean = transformed.iter().sum::<f64>() / n;
        let var = transformed.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / n;
        if var <= 0.0 {
            return Err(Error::InvalidArgument(
                "box-cox fit on a constant column".to_string(),
            ));
        }
        let ll = -0.5 * n * var.ln() + (lambda - 1.0) * log_sum;
        match best {
            Some((_, best_ll)) if ll <= best_ll => {}
            _ => best = Some((lambda, ll)),
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// Mean and sample standard deviation used for z-scoring. Errors on fewer
/// than two values or a constant column.
pub fn standardize_params(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(
            "standardization needs at least 2 values".to_string(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::InvalidArgument(
            "standardization of a constant column".to_string(),
        ));
    }
    Ok((mean, var.sqrt()))
}

/// One covariate column before encoding.
pub enum RawColumn {
    Continuous(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

/// Fills missing covariate cells in place: mean for continuous columns,
/// mode for categorical ones (ties break toward the earliest level seen).
pub fn impute_covariates(columns: &mut [RawColumn]) -> Result<()> {
    for (idx, col) in columns.iter_mut().enumerate() {
        match col {
            RawColumn::Continuous(values) => {
                let observed: Vec<f64> = values.iter().flatten().copied().collect();
                if observed.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "covariate column {idx} is entirely missing"
                    )));
                }
                let mean = observed.iter().sum::<f64>() / observed.len() as f64;
                for v in values.iter_mut() {
                    v.get_or_insert(mean);
                }
            }
            RawColumn::Categorical(values) => {
                let mut counts: Vec<(String, usize)> = Vec::new();
                for v in values.iter().flatten() {
                    match counts.iter_mut().find(|(level, _)| level == v) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((v.clone(), 1)),
                    }
                }
                if counts.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "covariate column {idx} is entirely missing"
                    )));
                }
                // Ties break toward the level seen first in the file.
                let mut mode = counts[0].0.clone();
                let mut best = counts[0].1;
                for (level, c) in counts.iter().skip(1) {
                    if *c > best {
                        best = *c;
                        mode = level.clone();
                    }
                }
                for v in values.iter_mut() {
                    v.get_or_insert(mode.clone());
                }
            }
        }
    }
    Ok(())
}

/// Per-column transform record, serialized to transforms.json.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TransformRecord {
    /// Box-Cox exponent; None for columns that were not power-transformed.
    pub lambda: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    /// "logit", "box-cox" or "none".
    pub transform: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Transforms {
    pub longitudinal: BTreeMap<String, TransformRecord>,
    pub metabolites: BTreeMap<String, TransformRecord>,
}

impl Transforms {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::numerical(format!("serializing transforms: {e}")))?;
        let mut f = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(text.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Declares how the raw files should be interpreted; normally parsed from
/// the [data] section of the run config.
#[derive(Debug, Clone)]
pub struct DataSchema {
    /// Longitudinal process names in model order.
    pub processes: Vec<String>,
    /// Processes whose values are proportions to logit-transform.
    pub logit_processes: Vec<String>,
    pub standardize_longitudinal: bool,
    /// Apply per-column Box-Cox to the metabolites.
    pub box_cox_metabolites: bool,
    pub standardize_metabolites: bool,
    /// Covariate columns to treat as categorical.
    pub categorical_covariates: Vec<String>,
    pub standardize_covariates: bool,
}

#[derive(Debug, Clone)]
pub struct DataPaths {
    pub longitudinal: PathBuf,
    pub metabolites: PathBuf,
    pub covariates: PathBuf,
}

#[derive(Debug, Clone)]
pub struct ProcessGrid {
    pub name: String,
    pub times: Vec<f64>,
}

/// Model-ready dataset on the transformed scale. Missing responses are
/// flagged in the masks and hold 0.0 placeholders until imputation.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub subject_ids: Vec<String>,
    pub processes: Vec<ProcessGrid>,
    /// N x p_Y, processes concatenated in declared order.
    pub y: DMatrix<f64>,
    pub y_observed: Vec<Vec<bool>>,
    pub metabolite_names: Vec<String>,
    /// N x p_M.
    pub m: DMatrix<f64>,
    pub m_observed: Vec<Vec<bool>>,
    pub covariate_names: Vec<String>,
    /// N x q, fully observed after imputation.
    pub x: DMatrix<f64>,
    pub transforms: Transforms,
    pub warnings: Vec<String>,
}

impl ModelData {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn p_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn p_m(&self) -> usize {
        self.m.ncols()
    }

    pub fn q(&self) -> usize {
        self.x.ncols()
    }

    /// Sizes n_s of the per-process grids.
    pub fn process_sizes(&self) -> Vec<usize> {
        self.processes.iter().map(|p| p.times.len()).collect()
    }
}

struct LongRow {
    subject: String,
    process: String,
    time: f64,
    value: Option<f64>,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        rows.push(record.iter().map(|c| c.to_string()).collect());
    }
    Ok((headers, rows))
}

fn parse_f64(cell: &str, path: &Path, row: usize, what: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| {
        Error::parse(
            path.display().to_string(),
            format!("row {row}: cannot parse {what} from {cell:?}"),
        )
    })
}

fn read_longitudinal(path: &Path) -> Result<Vec<LongRow>> {
    let (headers, rows) = read_csv(path)?;
    let expect = ["subject_id", "process", "time", "value"];
    if headers.len() != 4 || !headers.iter().zip(expect).all(|(h, e)| h == e) {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected header subject_id,process,time,value, got {}", headers.join(",")),
        ));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let value = if is_na(&row[3]) {
            None
        } else {
            Some(parse_f64(&row[3], path, i + 2, "value")?)
        };
        out.push(LongRow {
            subject: row[0].clone(),
            process: row[1].clone(),
            time: parse_f64(&row[2], path, i + 2, "time")?,
            value,
        });
    }
    Ok(out)
}

/// Loads and preprocesses the three input files.
///
/// Subjects are aligned across files by subject_id in order of first
/// appearance (covariates, then longitudinal, then metabolites). A subject
/// with no covariate row is dropped with a warning; subjects missing a
/// whole response block are kept with a full missing mask.
pub fn load_dataset(paths: &DataPaths, schema: &DataSchema) -> Result<ModelData> {
    let mut warnings = Vec::new();

    let long_rows = read_longitudinal(&paths.longitudinal)?;
    let (met_headers, met_rows) = read_csv(&paths.metabolites)?;
    let (cov_headers, cov_rows) = read_csv(&paths.covariates)?;
    for (file, headers) in [(&paths.metabolites, &met_headers), (&paths.covariates, &cov_headers)] {
        if headers.first().map(String::as_str) != Some("subject_id") {
            return Err(Error::parse(
                file.display().to_string(),
                "first column must be subject_id".to_string(),
            ));
        }
    }

    // Subject universe in deterministic first-appearance order.
    let mut subjects: Vec<String> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut note = |id: &str, subjects: &mut Vec<String>| {
        if seen.insert(id.to_string()) {
            subjects.push(id.to_string());
        }
    };
    for row in &cov_rows {
        note(&row[0], &mut subjects);
    }
    for row in &long_rows {
        note(&row.subject, &mut subjects);
    }
    for row in &met_rows {
        note(&row[0], &mut subjects);
    }

    let covered: std::collections::HashSet<&str> = cov_rows.iter().map(|r| r[0].as_str()).collect();
    let dropped: Vec<String> = subjects
        .iter()
        .filter(|s| !covered.contains(s.as_str()))
        .cloned()
        .collect();
    for id in &dropped {
        warnings.push(format!("subject {id} has no covariate row; dropped"));
    }
    subjects.retain(|s| covered.contains(s.as_str()));
    let n = subjects.len();
    if n == 0 {
        return Err(Error::Config("no subjects remain after alignment".to_string()));
    }
    let subject_index: std::collections::HashMap<&str, usize> =
        subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    // Per-process time grids: sorted unique observed times. Rows for one
    // subject and process must arrive in strictly increasing time order.
    for name in &schema.logit_processes {
        if !schema.processes.contains(name) {
            return Err(Error::Config(format!(
                "logit process {name} is not a declared process"
            )));
        }
    }
    let mut grids: Vec<Vec<f64>> = vec![Vec::new(); schema.processes.len()];
    let mut last_seen: std::collections::HashMap<(String, usize), f64> = std::collections::HashMap::new();
    for (i, row) in long_rows.iter().enumerate() {
        let pidx = schema
            .processes
            .iter()
            .position(|p| *p == row.process)
            .ok_or_else(|| {
                Error::parse(
                    paths.longitudinal.display().to_string(),
                    format!("row {}: unknown process {:?}", i + 2, row.process),
                )
            })?;
        if !subject_index.contains_key(row.subject.as_str()) {
            continue; // dropped subject
        }
        if let Some(prev) = last_seen.get(&(row.subject.clone(), pidx)) {
            if row.time <= *prev {
                return Err(Error::parse(
                    paths.longitudinal.display().to_string(),
                    format!(
                        "row {}: time {} for subject {} process {} is not strictly increasing (previous {})",
                        i + 2,
                        row.time,
                        row.subject,
                        row.process,
                        prev
                    ),
                ));
            }
        }
        last_seen.insert((row.subject.clone(), pidx), row.time);
        if !grids[pidx].iter().any(|t| *t == row.time) {
            grids[pidx].push(row.time);
        }
    }
    for (pidx, grid) in grids.iter_mut().enumerate() {
        if grid.is_empty() {
            return Err(Error::Config(format!(
                "process {} has no observations",
                schema.processes[pidx]
            )));
        }
        grid.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    }
    let processes: Vec<ProcessGrid> = schema
        .processes
        .iter()
        .zip(&grids)
        .map(|(name, times)| ProcessGrid { name: clone_name(name), times: times.clone() })
        .collect();
    let offsets: Vec<usize> = {
        let mut acc = 0;
        let mut out = Vec::new();
        for g in &grids {
            out.push(acc);
            acc += g.len();
        }
        out
    };
    let p_y: usize = grids.iter().map(Vec::len).sum();

    // Fill the Y matrix, transforming as configured.
    let mut y = DMatrix::<f64>::zeros(n, p_y);
    let mut y_observed = vec![vec![false; p_y]; n];
    for (i, row) in long_rows.iter().enumerate() {
        let Some(&sidx) = subject_index.get(row.subject.as_str()) else {
            continue;
        };
        let pidx = schema.processes.iter().position(|p| *p == row.process).expect("checked");
        let tidx = grids[pidx]
            .iter()
            .position(|t| *t == row.time)
            .expect("grid contains every observed time");
        let col = offsets[pidx] + tidx;
        if y_observed[sidx][col] {
            return Err(Error::parse(
                paths.longitudinal.display().to_string(),
                format!(
                    "row {}: duplicate observation for subject {} process {} time {}",
                    i + 2,
                    row.subject,
                    row.process,
                    row.time
                ),
            ));
        }
        let Some(raw) = row.value else { continue };
        let value = if schema.logit_processes.contains(&row.process) {
            logit(raw).ok_or_else(|| Error::Domain {
                column: row.process.clone(),
                row: i + 2,
                message: format!("logit requires values in (0,1), got {raw}"),
            })?
        } else {
            raw
        };
        y[(sidx, col)] = value;
        y_observed[sidx][col] = true;
    }

    let mut transforms = Transforms::default();
    for (pidx, proc) in schema.processes.iter().enumerate() {
        let kind = if schema.logit_processes.contains(proc) { "logit" } else { "none" };
        let cols = offsets[pidx]..offsets[pidx] + grids[pidx].len();
        let mut observed = Vec::new();
        for i in 0..n {
            for c in cols.clone() {
                if y_observed[i][c] {
                    observed.push(y[(i, c)]);
                }
            }
        }
        let (mean, sd) = if schema.standardize_longitudinal {
            standardize_params(&observed)
                .map_err(|e| Error::Config(format!("process {proc}: {e}")))?
        } else {
            (0.0, 1.0)
        };
        if schema.standardize_longitudinal {
            for i in 0..n {
                for c in cols.clone() {
                    if y_observed[i][c] {
                        y[(i, c)] = (y[(i, c)] - mean) / sd;
                    }
                }
            }
        }
        transforms.longitudinal.insert(
            proc.clone(),
            TransformRecord { lambda: None, mean, sd, transform: kind.to_string() },
        );
    }

    // Metabolites: Box-Cox then standardize, per column.
    let metabolite_names: Vec<String> = met_headers[1..].to_vec();
    let p_m = metabolite_names.len();
    let mut m = DMatrix::<f64>::zeros(n, p_m);
    let mut m_observed = vec![vec![false; p_m]; n];
    let mut met_seen = std::collections::HashSet::new();
    for (ri, row) in met_rows.iter().enumerate() {
        let Some(&sidx) = subject_index.get(row[0].as_str()) else {
            continue;
        };
        if !met_seen.insert(row[0].clone()) {
            return Err(Error::parse(
                paths.metabolites.display().to_string(),
                format!("row {}: duplicate subject {}", ri + 2, row[0]),
            ));
        }
        for (j, cell) in row[1..].iter().enumerate() {
            if is_na(cell) {
                continue;
            }
            m[(sidx, j)] = parse_f64(cell, &paths.metabolites, ri + 2, "metabolite value")?;
            m_observed[sidx][j] = true;
        }
    }
    for (j, name) in metabolite_names.iter().enumerate() {
        let observed_rows: Vec<usize> = (0..n).filter(|i| m_observed[*i][j]).collect();
        let observed: Vec<f64> = observed_rows.iter().map(|&i| m[(i, j)]).collect();
        if observed.is_empty() {
            return Err(Error::Config(format!("metabolite column {name} is entirely missing")));
        }
        let lambda = if schema.box_cox_metabolites {
            if let Some(pos) = observed.iter().position(|v| *v <= 0.0) {
                return Err(Error::Domain {
                    column: name.clone(),
                    row: observed_rows[pos] + 2,
                    message: format!("box-cox requires positive values, got {}", observed[pos]),
                });
            }
            let lambda = fit_box_cox(&observed)
                .map_err(|e| Error::Config(format!("metabolite column {name}: {e}")))?;
            for &i in &observed_rows {
                m[(i, j)] = box_cox(m[(i, j)], lambda).expect("validated positive");
            }
            Some(lambda)
        } else {
            None
        };
        let transformed: Vec<f64> = observed_rows.iter().map(|&i| m[(i, j)]).collect();
        let (mean, sd) = if schema.standardize_metabolites {
            standardize_params(&transformed)
                .map_err(|e| Error::Config(format!("metabolite column {name}: {e}")))?
        } else {
            (0.0, 1.0)
        };
        if schema.standardize_metabolites {
            for &i in &observed_rows {
                m[(i, j)] = (m[(i, j)] - mean) / sd;
            }
        }
        transforms.metabolites.insert(
            name.clone(),
            TransformRecord {
                lambda,
                mean,
                sd,
                transform: if lambda.is_some() { "box-cox".to_string() } else { "none".to_string() },
            },
        );
    }

    // Covariates: impute, encode categoricals, standardize continuous.
    let covariate_names: Vec<String> = cov_headers[1..].to_vec();
    let q = covariate_names.len();
    for cat in &schema.categorical_covariates {
        if !covariate_names.contains(cat) {
            return Err(Error::Config(format!(
                "categorical covariate {cat} is not a column of the covariate file"
            )));
        }
    }
    let mut cov_cells: Vec<Vec<Option<String>>> = vec![vec![None; q]; n];
    let mut cov_seen = std::collections::HashSet::new();
    for (ri, row) in cov_rows.iter().enumerate() {
        let sidx = subject_index[row[0].as_str()];
        if !cov_seen.insert(row[0].clone()) {
            return Err(Error::parse(
                paths.covariates.display().to_string(),
                format!("row {}: duplicate subject {}", ri + 2, row[0]),
            ));
        }
        for j in 0..q {
            let cell = &row[j + 1];
            if !is_na(cell) {
                cov_cells[sidx][j] = Some(cell.clone());
            }
        }
    }
    let mut columns: Vec<RawColumn> = Vec::with_capacity(q);
    for (j, name) in covariate_names.iter().enumerate() {
        if schema.categorical_covariates.contains(name) {
            columns.push(RawColumn::Categorical(
                (0..n).map(|i| cov_cells[i][j].clone()).collect(),
            ));
        } else {
            let mut vals = Vec::with_capacity(n);
            for i in 0..n {
                match &cov_cells[i][j] {
                    None => vals.push(None),
                    Some(cell) => vals.push(Some(parse_f64(cell, &paths.covariates, i + 2, name)?)),
                }
            }
            columns.push(RawColumn::Continuous(vals));
        }
    }
    impute_covariates(&mut columns).map_err(|e| Error::Config(format!("covariates: {e}")))?;
    let mut x = DMatrix::<f64>::zeros(n, q);
    for (j, col) in columns.iter().enumerate() {
        match col {
            RawColumn::Continuous(vals) => {
                let dense: Vec<f64> = vals.iter().map(|v| v.expect("imputed")).collect();
                if schema.standardize_covariates {
                    match standardize_params(&dense) {
                        Ok((mean, sd)) => {
                            for i in 0..n {
                                x[(i, j)] = (dense[i] - mean) / sd;
                            }
                        }
                        Err(_) => {
                            // Constant continuous covariate: keep as is
                            // (an intercept-like column is legitimate).
                            for i in 0..n {
                                x[(i, j)] = dense[i];
                            }
                            warnings.push(format!(
                                "covariate {} is constant; left unstandardized",
                                covariate_names[j]
                            ));
                        }
                    }
                } else {
                    for i in 0..n {
                        x[(i, j)] = dense[i];
                    }
                }
            }
            RawColumn::Categorical(vals) => {
                let mut levels: Vec<&String> = Vec::new();
                for v in vals.iter() {
                    let v = v.as_ref().expect("imputed");
                    if !levels.contains(&v) {
                        levels.push(v);
                    }
                }
                let mut sorted = levels.clone();
                sorted.sort();
                for i in 0..n {
                    let v = vals[i].as_ref().expect("imputed");
                    let code = sorted.iter().position(|l| *l == v).expect("level present");
                    x[(i, j)] = (code + 1) as f64;
                }
            }
        }
    }

    Ok(ModelData {
        subject_ids: subjects,
        processes,
        y,
        y_observed,
        metabolite_names,
        m,
        m_observed,
        covariate_names,
        x,
        transforms,
        warnings,
    })
}

fn clone_name(name: &str) -> String {
    name.to_string()
}
