//! Command handlers for the `gpggm` binary. Kept in a library so
//! integration tests can drive complete runs in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gpggm::config::Config;
use gpggm::error::{Error, Result};
use gpggm::preprocess::{load_dataset, ModelData};
use gpggm::sampler::run_chain;
use gpggm::simulate::{simulate, SimScenario};
use gpggm::summary::{diffnet_pair, summarize_store};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Environment variable that overrides the configured output directory.
pub const OUT_DIR_ENV: &str = "GPGGM_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "gpggm", version, about = "Clustered longitudinal + network inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the default two-cluster benchmark dataset.
    Simulate {
        /// Directory for the dataset, truth file and prefilled config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20240613)]
        seed: u64,
    },
    /// Run the full pipeline: preprocess, sample, store.
    Fit(FitArgs),
    /// Re-run the sampler with the partition pinned to a file's labels.
    RefitFixedPartition {
        #[command(flatten)]
        fit: FitArgs,
        /// CSV of cluster labels (one row per subject; last column used).
        #[arg(long)]
        partition: PathBuf,
    },
    /// Compute posterior summaries from a sample store.
    Summarize {
        /// Sample store directory (a `fit` output).
        #[arg(long)]
        store: PathBuf,
        /// Output directory; defaults to `<store>/summary`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Also write the differential network for one cluster pair.
        #[arg(long, num_args = 2, value_names = ["K1", "K2"])]
        diffnet: Option<Vec<usize>>,
    },
    /// Differential network for one cluster pair (summarize --diffnet).
    Diffnet {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        cluster1: usize,
        cluster2: usize,
    },
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of independent chains (seeds seed+0 .. seed+n-1).
    #[arg(long, default_value_t = 1)]
    pub chains: u64,
}

/// Everything needed to reproduce a run, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: Option<String>,
    pub data_sha256: BTreeMap<String, String>,
    pub seed: u64,
    pub version: String,
    /// Wall-clock bounds; informational only, excluded from determinism
    /// comparisons.
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn now_utc() -> String {
    // RFC 3339 from the epoch; avoids a clock/timezone dependency.
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let days = secs / 86_400;
    let (h, m, s) = ((secs % 86_400) / 3600, (secs % 3600) / 60, secs % 60);
    // Civil date from day count (Howard Hinnant's algorithm).
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let mo = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if mo <= 2 { y + 1 } else { y };
    format!("{y:04}-{mo:02}-{d:02}T{h:02}:{m:02}:{s:02}Z")
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::numerical(format!("serializing manifest: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(path)
}

fn data_hashes(config: &Config) -> Result<BTreeMap<String, String>> {
    let paths = config.data_paths();
    let mut hashes = BTreeMap::new();
    for p in [&paths.longitudinal, &paths.metabolites, &paths.covariates] {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| p.display().to_string());
        hashes.insert(name, sha256_file(p)?);
    }
    Ok(hashes)
}

fn load_inputs(config_path: &Path) -> Result<(Config, ModelData)> {
    let config = Config::from_file(config_path)?;
    let data = load_dataset(&config.data_paths(), &config.data_schema())?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok((config, data))
}

fn resolve_out_dir(config: &Config, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    let env = std::env::var(OUT_DIR_ENV).ok();
    config.output_dir(env.as_deref())
}

/// Reads cluster labels from a CSV: one row per subject, last column is
/// the label. A header row is detected by a non-numeric final field.
pub fn read_partition_file(path: &Path, n_subjects: usize) -> Result<Vec<usize>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let field = line.rsplit(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<usize>() {
            Ok(c) => labels.push(c),
            Err(_) if lineno == 0 => continue, // header
            Err(_) => {
                return Err(Error::parse(
                    path.display().to_string(),
                    format!("line {}: cluster label {field:?} is not an integer", lineno + 1),
                ))
            }
        }
    }
    if labels.len() != n_subjects {
        return Err(Error::InvalidArgument(format!(
            "partition file {} has {} labels but the dataset has {} subjects",
            path.display(),
            labels.len(),
            n_subjects
        )));
    }
    Ok(labels)
}

fn run_fit(args: &FitArgs, partition: Option<&Path>, command: &str) -> Result<()> {
    let started_at = now_utc();
    let (config, data) = load_inputs(&args.config)?;
    let fixed = partition.map(|p| read_partition_file(p, data.n_subjects())).transpose()?;
    let seed = args.seed.unwrap_or(config.mcmc.seed);
    let out_root = resolve_out_dir(&config, args.out.as_deref());
    std::fs::create_dir_all(&out_root)
        .map_err(|e| Error::io(out_root.display().to_string(), e))?;
    let transforms_path = out_root.join("transforms.json");
    data.transforms.write_json(&transforms_path)?;
    let mut outputs = vec![transforms_path.display().to_string()];
    for chain in 0..args.chains.max(1) {
        let dir = if args.chains > 1 {
            out_root.join(format!("chain{chain}"))
        } else {
            out_root.clone()
        };
        let summary =
            run_chain(&data, &config, &dir, seed + chain, chain, fixed.as_deref())?;
        println!(
            "chain {chain}: {} iterations, {} saved draws, {} clusters, loglik {:.3}",
            summary.n_iterations,
            summary.n_saved,
            summary.n_clusters_last,
            summary.final_log_likelihood
        );
        outputs.extend(summary.files.iter().map(|p| p.display().to_string()));
    }
    let manifest = RunManifest {
        command: command.to_string(),
        config_sha256: Some(sha256_file(&args.config)?),
        data_sha256: data_hashes(&config)?,
        seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        started_at,
        finished_at: now_utc(),
        outputs,
    };
    let path = write_manifest(&out_root, &manifest)?;
    println!("manifest: {}", path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { out, seed } => {
            let outputs = simulate(&SimScenario::default(), &out, seed)?;
            for f in &outputs.files {
                println!("wrote {}", f.display());
            }
            let manifest = RunManifest {
                command: "simulate".to_string(),
                config_sha256: None,
                data_sha256: BTreeMap::new(),
                seed,
                version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: now_utc(),
                finished_at: now_utc(),
                outputs: outputs.files.iter().map(|p| p.display().to_string()).collect(),
            };
            write_manifest(&out, &manifest)?;
            Ok(())
        }
        Command::Fit(args) => run_fit(&args, None, "fit"),
        Command::RefitFixedPartition { fit, partition } => {
            run_fit(&fit, Some(&partition), "refit-fixed-partition")
        }
        Command::Summarize { store, out, threshold, diffnet } => {
            let out_dir = out.unwrap_or_else(|| store.join("summary"));
            let outputs = summarize_store(&store, &out_dir, threshold)?;
            let binder_k = outputs.binder_labels.iter().max().map_or(0, |m| m + 1);
            println!("binder partition: {binder_k} clusters, loss {:.4}", outputs.binder_loss);
            match outputs.n_clusters {
                Some(k) => println!("constant partition with {k} clusters: network summaries written"),
                None => println!("partitions vary across draws: per-cluster outputs skipped"),
            }
            for f in &outputs.files {
                println!("wrote {}", f.display());
            }
            if let Some(pair) = diffnet {
                let path = diffnet_pair(&store, &out_dir, pair[0], pair[1], threshold)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Diffnet { store, out, threshold, cluster1, cluster2 } => {
            let out_dir = out.unwrap_or_else(|| store.join("summary"));
            let path = diffnet_pair(&store, &out_dir, cluster1, cluster2, threshold)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

/// 0 success, 1 user/config error, 2 numerical failure.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_user_error() {
        1
    } else {
        2
    }
}
