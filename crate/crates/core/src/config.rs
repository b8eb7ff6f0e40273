//! Run configuration: a TOML file with [data], [model], [mcmc] and
//! [output] sections. Unknown keys are rejected. Relative paths are
//! resolved against the config file's directory; the output directory can
//! be overridden by the GPGGM_OUT_DIR environment variable.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ggm::gwishart::GWishartParams;
use crate::preprocess::{DataPaths, DataSchema};

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub mcmc: McmcConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub longitudinal: String,
    pub metabolites: String,
    pub covariates: String,
    /// Longitudinal process names, in the order their blocks are stacked.
    pub processes: Vec<String>,
    /// Processes transformed by logit before standardization.
    pub logit_processes: Vec<String>,
    pub standardize_longitudinal: bool,
    pub box_cox_metabolites: bool,
    pub standardize_metabolites: bool,
    pub categorical_covariates: Vec<String>,
    pub standardize_covariates: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            longitudinal: "longitudinal.csv".to_string(),
            metabolites: "metabolites.csv".to_string(),
            covariates: "covariates.csv".to_string(),
            processes: Vec::new(),
            logit_processes: Vec::new(),
            standardize_longitudinal: true,
            box_cox_metabolites: true,
            standardize_metabolites: true,
            categorical_covariates: Vec::new(),
            standardize_covariates: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Dirichlet-process concentration.
    pub alpha: f64,
    /// Edge inclusion probability; None uses 2/(p_M - 1).
    pub edge_prior_d: Option<f64>,
    /// G-Wishart degrees of freedom; None uses p_M + 2.
    pub gwishart_df: Option<f64>,
    /// G-Wishart scale matrix is gwishart_scale * I.
    pub gwishart_scale: f64,
    pub tau2_shape: f64,
    pub tau2_rate: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    pub phi2_shape: f64,
    pub phi2_rate: f64,
    pub eta2_shape: f64,
    pub eta2_rate: f64,
    pub xi_shape: f64,
    pub xi_rate: f64,
    pub mu_theta_prior_mean: f64,
    pub mu_theta_prior_sd: f64,
    /// "full" or "disabled" (prior-only chain).
    pub likelihood: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            alpha: 0.18,
            edge_prior_d: None,
            gwishart_df: None,
            gwishart_scale: 10.0,
            tau2_shape: 3.0,
            tau2_rate: 2.0,
            sigma2_shape: 3.0,
            sigma2_rate: 2.0,
            phi2_shape: 3.0,
            phi2_rate: 2.0,
            eta2_shape: 3.0,
            eta2_rate: 2.0,
            xi_shape: 1.0,
            xi_rate: 1.0,
            mu_theta_prior_mean: 0.0,
            mu_theta_prior_sd: 1.0,
            likelihood: "full".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    pub n_iter: usize,
    /// Iteration at which proposal adaptation starts.
    pub adapt_init: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Monte Carlo draws per G-Wishart normalizing constant.
    pub n_mc_norm: usize,
    pub gwishart_refine_sweeps: usize,
    /// Edge moves per cluster per iteration; None uses p_M.
    pub bd_steps_per_cluster: Option<usize>,
    /// Auxiliary atoms in the urn sweep.
    pub m_aux: usize,
    pub snapshot_every: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 50_000,
            adapt_init: 100,
            n_burnin: 40_000,
            thin: 2,
            seed: 20240613,
            n_mc_norm: 500,
            gwishart_refine_sweeps: 5,
            bd_steps_per_cluster: None,
            m_aux: 2,
            snapshot_every: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".to_string() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodMode {
    Full,
    Disabled,
}

#[derive(Debug, Clone, Copy)]
pub struct InvGammaPrior {
    pub shape: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

/// Model hyperparameters with the metabolite-dimension-dependent defaults
/// filled in.
#[derive(Debug, Clone)]
pub struct Hyperparams {
    pub alpha: f64,
    pub edge_prior_d: f64,
    pub gw_prior: GWishartParams,
    pub tau2: InvGammaPrior,
    pub sigma2: InvGammaPrior,
    pub phi2: InvGammaPrior,
    pub eta2: InvGammaPrior,
    pub xi: GammaPrior,
    pub mu_theta_mean: f64,
    pub mu_theta_sd: f64,
    pub likelihood: LikelihoodMode,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut config: Config =
            toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        config.validate()?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Joins relative data/output paths onto `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let join = |s: &str| -> String {
            let p = Path::new(s);
            if p.is_absolute() {
                s.to_string()
            } else {
                base.join(p).to_string_lossy().into_owned()
            }
        };
        self.data.longitudinal = join(&self.data.longitudinal);
        self.data.metabolites = join(&self.data.metabolites);
        self.data.covariates = join(&self.data.covariates);
        self.output.dir = join(&self.output.dir);
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mcmc;
        if m.n_iter == 0 || m.n_burnin >= m.n_iter {
            return Err(Error::Config(format!(
                "n_burnin ({}) must be smaller than n_iter ({})",
                m.n_burnin, m.n_iter
            )));
        }
        if m.thin == 0 {
            return Err(Error::Config("thin must be at least 1".to_string()));
        }
        if m.adapt_init > m.n_burnin {
            return Err(Error::Config(format!(
                "adapt_init ({}) must not exceed n_burnin ({})",
                m.adapt_init, m.n_burnin
            )));
        }
        if m.m_aux == 0 {
            return Err(Error::Config("m_aux must be at least 1".to_string()));
        }
        if m.n_mc_norm == 0 {
            return Err(Error::Config("n_mc_norm must be at least 1".to_string()));
        }
        if m.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be at least 1".to_string()));
        }
        let mo = &self.model;
        for (name, v) in [
            ("alpha", mo.alpha),
            ("gwishart_scale", mo.gwishart_scale),
            ("tau2_shape", mo.tau2_shape),
            ("tau2_rate", mo.tau2_rate),
            ("sigma2_shape", mo.sigma2_shape),
            ("sigma2_rate", mo.sigma2_rate),
            ("phi2_shape", mo.phi2_shape),
            ("phi2_rate", mo.phi2_rate),
            ("eta2_shape", mo.eta2_shape),
            ("eta2_rate", mo.eta2_rate),
            ("xi_shape", mo.xi_shape),
            ("xi_rate", mo.xi_rate),
            ("mu_theta_prior_sd", mo.mu_theta_prior_sd),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(d) = mo.edge_prior_d {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::Config(format!(
                    "edge_prior_d must lie in (0, 1), got {d}"
                )));
            }
        }
        if let Some(df) = mo.gwishart_df {
            if !(df.is_finite() && df > 2.0) {
                return Err(Error::Config(format!("gwishart_df must exceed 2, got {df}")));
            }
        }
        match mo.likelihood.as_str() {
            "full" | "disabled" => {}
            other => {
                return Err(Error::Config(format!(
                    "likelihood must be \"full\" or \"disabled\", got \"{other}\""
                )))
            }
        }
        Ok(())
    }

    pub fn data_paths(&self) -> DataPaths {
        DataPaths {
            longitudinal: PathBuf::from(&self.data.longitudinal),
            metabolites: PathBuf::from(&self.data.metabolites),
            covariates: PathBuf::from(&self.data.covariates),
        }
    }

    pub fn data_schema(&self) -> DataSchema {
        DataSchema {
            processes: self.data.processes.clone(),
            logit_processes: self.data.logit_processes.clone(),
            standardize_longitudinal: self.data.standardize_longitudinal,
            box_cox_metabolites: self.data.box_cox_metabolites,
            standardize_metabolites: self.data.standardize_metabolites,
            categorical_covariates: self.data.categorical_covariates.clone(),
            standardize_covariates: self.data.standardize_covariates,
        }
    }

    /// Output directory after the environment override (pass the value of
    /// GPGGM_OUT_DIR, if set).
    pub fn output_dir(&self, env_override: Option<&str>) -> PathBuf {
        match env_override {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.output.dir),
        }
    }

    /// Fills in the metabolite-dimension-dependent defaults.
    pub fn hyperparams(&self, p_m: usize) -> Result<Hyperparams> {
        let mo = &self.model;
        let edge_prior_d = match mo.edge_prior_d {
            Some(d) => d,
            None => {
                if p_m < 2 {
                    return Err(Error::Config(
                        "edge_prior_d default needs at least 2 metabolites".to_string(),
                    ));
                }
                let d = 2.0 / (p_m as f64 - 1.0);
                if !(d > 0.0 && d < 1.0) {
                    return Err(Error::Config(format!(
                        "default edge_prior_d = 2/(p_M - 1) = {d} is not in (0, 1) for \
                         p_M = {p_m}; set edge_prior_d explicitly"
                    )));
                }
                d
            }
        };
        let nu = mo.gwishart_df.unwrap_or(p_m as f64 + 2.0);
        let gw_prior = GWishartParams::new(nu, DMatrix::identity(p_m, p_m) * mo.gwishart_scale)?;
        Ok(Hyperparams {
            alpha: mo.alpha,
            edge_prior_d,
            gw_prior,
            tau2: InvGammaPrior { shape: mo.tau2_shape, rate: mo.tau2_rate },
            sigma2: InvGammaPrior { shape: mo.sigma2_shape, rate: mo.sigma2_rate },
            phi2: InvGammaPrior { shape: mo.phi2_shape, rate: mo.phi2_rate },
            eta2: InvGammaPrior { shape: mo.eta2_shape, rate: mo.eta2_rate },
            xi: GammaPrior { shape: mo.xi_shape, rate: mo.xi_rate },
            mu_theta_mean: mo.mu_theta_prior_mean,
            mu_theta_sd: mo.mu_theta_prior_sd,
            likelihood: if mo.likelihood == "full" {
                LikelihoodMode::Full
            } else {
                LikelihoodMode::Disabled
            },
        })
    }

    /// Saved-record count implied by the schedule.
    pub fn n_saved(&self) -> usize {
        (self.mcmc.n_iter - self.mcmc.n_burnin) / self.mcmc.thin
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }
}
