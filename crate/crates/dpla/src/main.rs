//! `dpla` command line: dataset caching, experiment runs, checkpoint
//! re-scoring, gradient verification, and plot-ready metric export.
//!
//! Artifacts live in one directory per run: the dataset cache (shared
//! across runs with the same data recipe, optionally redirected via
//! `DPLA_CACHE_DIR`), line-delimited metric records, a manifest tying
//! the run to its config and cache hash, and the model checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use dpla::config::{parse_config, ExperimentConfig};
use dpla::datagen::{decode_cache, write_cache, DatasetSpec, ExperimentData};
use dpla::eval::MetricsReport;
use dpla::gradcheck;
use dpla::model::Mlp;
use dpla::trainer::{
    evaluate_pool, evaluate_test, manifest_toml, parse_manifest, prepare_data, run_on_data,
};

const CACHE_DIR_ENV: &str = "DPLA_CACHE_DIR";
const METRICS_FILE: &str = "metrics.txt";
const MANIFEST_FILE: &str = "manifest.toml";
const CHECKPOINT_FILE: &str = "model.ckpt";
const EXPORT_FILE: &str = "metrics.csv";

#[derive(Parser)]
#[command(
    name = "dpla",
    version,
    about = "Dual-stage post-hoc logit adjustment on long-tailed open-world SSL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config selection shared by the data-producing commands.
#[derive(Args)]
struct ConfigArgs {
    /// Config file, layered over the preset it names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset used as-is (no config file).
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize and cache the dataset for a configuration.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Artifact directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train; writes metric records, a manifest, and a checkpoint.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Disable both adjustment stages and pseudo-label refinement.
        #[arg(long)]
        baseline: bool,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Artifact directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Re-score a finished run's checkpoint on its cached dataset,
    /// including transductive scoring of the unlabeled pool.
    Eval {
        /// Artifact directory of the finished run.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Verify every analytic gradient against finite differences.
    CheckGrads {
        /// Fixture seed.
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Convert a run's metric records to comma-separated values.
    Export {
        /// Artifact directory holding the metric records.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { cfg, out } => gen_data(&resolve_config(&cfg, false, None)?, &out),
        Command::Run {
            cfg,
            baseline,
            epochs,
            out,
        } => run(&resolve_config(&cfg, baseline, epochs)?, &out),
        Command::Eval { out } => eval(&out),
        Command::CheckGrads { seed } => check_grads(seed),
        Command::Export { out } => export(&out),
    }
}

fn resolve_config(
    args: &ConfigArgs,
    baseline: bool,
    epochs: Option<usize>,
) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => parse_config(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::preset("synthetic-small")?,
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if baseline {
        cfg.baseline_mode = true;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Everything that determines the dataset, hashed into the cache name
/// so differing recipes never collide in a shared cache directory.
#[derive(Serialize)]
struct CacheKey<'a> {
    dataset: &'a DatasetSpec,
    separation: f64,
    test_per_class: usize,
}

fn cache_file_name(cfg: &ExperimentConfig) -> Result<String> {
    let key = toml::to_string(&CacheKey {
        dataset: &cfg.dataset,
        separation: cfg.separation,
        test_per_class: cfg.test_per_class,
    })
    .context("serialize cache key")?;
    Ok(format!("data-{}.bin", &sha256_hex(key.as_bytes())[..12]))
}

fn cache_dir(out: &Path) -> PathBuf {
    std::env::var_os(CACHE_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.to_path_buf())
}

fn cache_path(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    Ok(cache_dir(out).join(cache_file_name(cfg)?))
}

/// Load the dataset cache for a config, generating it on first use.
/// Always decodes from the cache bytes, so a run consumes exactly what
/// later `eval` calls will read.
fn ensure_cache(cfg: &ExperimentConfig, out: &Path) -> Result<(ExperimentData, String, PathBuf)> {
    let path = cache_path(cfg, out)?;
    let bytes = if path.exists() {
        fs::read(&path).with_context(|| format!("read dataset cache {}", path.display()))?
    } else {
        let dir = path.parent().expect("cache path has a parent");
        fs::create_dir_all(dir).with_context(|| format!("create {}", dir.display()))?;
        let data = prepare_data(cfg)?;
        write_cache(&path, &data)?
    };
    let data = decode_cache(&bytes)?;
    Ok((data, sha256_hex(&bytes), path))
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (data, sha, path) = ensure_cache(cfg, out)?;
    println!(
        "{} sha256 {sha} ({} labeled, {} unlabeled, {} test)",
        path.display(),
        data.splits.labeled_labels.len(),
        data.splits.unlabeled_features.rows(),
        data.test.labels.len()
    );
    Ok(())
}

fn run(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let (data, sha, _) = ensure_cache(cfg, out)?;
    let outcome = run_on_data(cfg, &data)?;
    let mut records = String::new();
    for report in outcome.history() {
        let record = report.to_record();
        println!("{record}");
        records.push_str(&record);
        records.push('\n');
    }
    fs::write(out.join(METRICS_FILE), records).context("write metric records")?;
    fs::write(out.join(MANIFEST_FILE), manifest_toml(cfg, &sha)?).context("write manifest")?;
    outcome.state.model.save(&out.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn eval(out: &Path) -> Result<()> {
    let manifest_path = out.join(MANIFEST_FILE);
    let ckpt_path = out.join(CHECKPOINT_FILE);
    if !manifest_path.exists() {
        bail!("no manifest at {}; run training first", manifest_path.display());
    }
    if !ckpt_path.exists() {
        bail!("no checkpoint at {}", ckpt_path.display());
    }
    let manifest = parse_manifest(
        &fs::read_to_string(&manifest_path)
            .with_context(|| format!("read {}", manifest_path.display()))?,
    )?;
    let cfg = manifest.config;
    let data_path = cache_path(&cfg, out)?;
    if !data_path.exists() {
        bail!("no dataset cache at {}", data_path.display());
    }
    let bytes =
        fs::read(&data_path).with_context(|| format!("read {}", data_path.display()))?;
    let sha = sha256_hex(&bytes);
    if sha != manifest.cache_sha256 {
        bail!(
            "dataset cache {} does not match the manifest (sha256 {sha} vs {})",
            data_path.display(),
            manifest.cache_sha256
        );
    }
    let data = decode_cache(&bytes)?;
    let model = Mlp::load(&ckpt_path)?;
    let epoch = cfg.epochs.saturating_sub(1);
    let test = evaluate_test(&cfg, &model, &data.splits, &data.test, epoch)?;
    let pool = evaluate_pool(&cfg, &model, &data.splits, epoch)?;
    println!("test {}", test.to_record());
    println!("pool {}", pool.to_record());
    Ok(())
}

fn check_grads(seed: u64) -> Result<()> {
    let report = gradcheck::run_suite(seed)?;
    println!("{report}");
    if !report.all_within(gradcheck::TOLERANCE) {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_error(),
            gradcheck::TOLERANCE
        );
    }
    Ok(())
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn export(out: &Path) -> Result<()> {
    let metrics_path = out.join(METRICS_FILE);
    if !metrics_path.exists() {
        bail!("no metric records at {}", metrics_path.display());
    }
    let text = fs::read_to_string(&metrics_path)
        .with_context(|| format!("read {}", metrics_path.display()))?;
    let mut csv = String::from("epoch,known_acc,novel_acc,all_acc,novel_nmi,all_nmi\n");
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r = MetricsReport::parse_record(line)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            csv_field(r.known_acc),
            csv_field(r.novel_acc),
            csv_field(r.all_acc),
            csv_field(r.novel_nmi),
            csv_field(r.all_nmi)
        ));
    }
    let path = out.join(EXPORT_FILE);
    fs::write(&path, csv).with_context(|| format!("write {}", path.display()))?;
    println!("{}", path.display());
    Ok(())
}
