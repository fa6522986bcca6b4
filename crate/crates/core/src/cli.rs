//! Command-line driver: `synth`, `train`, `eval`, `sweep` and `plot`.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, config or input
//! files), 2 for internal failures such as diverged training.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{self, Dataset, Split};
use crate::detect::{self, DetectionSet, PostprocParams};
use crate::error::{Error, Result};
use crate::eval;
use crate::net::{self, CheckpointMeta};
use crate::plot::{self, SweepSeries};
use crate::synthgen;
use crate::train::{self, Tier, TrainConfig};

pub const SEED_ENV: &str = "CYTOCOUNT_SEED";

/// Train images of seed `s` use generator seeds starting at `s * SEED_STRIDE`.
const SEED_STRIDE: u64 = 100_000;

#[derive(Debug, Parser)]
#[command(name = "cytocount", version, about = "Weakly-supervised cell classification and counting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train and test splits.
    Synth {
        #[arg(short, long)]
        config: PathBuf,
        /// Dataset root; defaults to the config's `data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the prior model (if the tier needs it) and train the multi-task network.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value = "ours++")]
        tier: Tier,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Dataset root; defaults to the config's `data_dir`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Detect cells with a checkpoint and score them against the annotations.
    Eval(EvalArgs),
    /// Like `eval`, but only writes the radius sweep CSV.
    Sweep(EvalArgs),
    /// Plot one or more sweep CSVs as total/mean F1 against radius.
    Plot {
        /// `LABEL=FILE` or `FILE` (labelled by its parent directory); repeatable.
        #[arg(long, required = true)]
        sweep: Vec<String>,
        /// Output image (`.svg`).
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Config supplying defaults for the post-processing and radius flags.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Comma-separated, strictly ascending.
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    /// Matching radius for the F1 report.
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub min_distance: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub class_exclusive: bool,
    /// Output directory; defaults to `eval_<split>` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written to `manifest.json` before any training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub tier: Tier,
    pub seed: u64,
    pub seed_source: String,
    pub config: ExperimentConfig,
    pub train_config: TrainConfig,
    pub paths: ManifestPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
    pub config: PathBuf,
    pub priors: Option<PathBuf>,
    pub checkpoints: PathBuf,
    pub losses: PathBuf,
    pub model: PathBuf,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { config, out } => cmd_synth(&config, out.as_deref()),
        Command::Train { config, tier, out, data } => cmd_train(&config, tier, &out, data.as_deref()).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args, true),
        Command::Sweep(args) => cmd_eval(&args, false),
        Command::Plot { sweep, out } => cmd_plot(&sweep, &out),
    }
}

/// Loads `path` and applies the seed override from the environment.
fn load_config(path: &Path) -> Result<(ExperimentConfig, String)> {
    let mut cfg = ExperimentConfig::load(path)?;
    let mut source = "config".to_string();
    if let Ok(value) = std::env::var(SEED_ENV) {
        cfg.seed = value
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}='{value}' is not an unsigned integer")))?;
        source = SEED_ENV.to_string();
    }
    Ok((cfg, source))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generator seeds of the first train and first test image.
pub fn synth_seeds(cfg: &ExperimentConfig) -> Result<(u64, u64)> {
    let train = cfg
        .seed
        .checked_mul(SEED_STRIDE)
        .ok_or_else(|| Error::Config(format!("seed {} too large", cfg.seed)))?;
    Ok((train, train + cfg.n_train as u64))
}

pub fn cmd_synth(config: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, _) = load_config(config)?;
    if cfg.n_train as u64 + cfg.n_test as u64 > SEED_STRIDE {
        return Err(Error::Config(format!("at most {SEED_STRIDE} images per dataset")));
    }
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_dir.clone());
    let spec = cfg.synth_spec();
    let (train_seed, test_seed) = synth_seeds(&cfg)?;
    let train = synthgen::generate_dataset(&spec, cfg.n_train, train_seed, Split::Train, &root)?;
    let test = synthgen::generate_dataset(&spec, cfg.n_test, test_seed, Split::Test, &root)?;
    eprintln!(
        "wrote {} train and {} test images to {}",
        train.len(),
        test.len(),
        root.display()
    );
    Ok(())
}

/// Runs one training experiment into `out` and returns its manifest.
pub fn cmd_train(config: &Path, tier: Tier, out: &Path, data: Option<&Path>) -> Result<ExperimentManifest> {
    let (mut cfg, seed_source) = load_config(config)?;
    if let Some(dir) = data {
        cfg.data_dir = dir.to_path_buf();
    }
    let train_cfg = train::ablation_variant(&cfg.train_config(), tier);
    train_cfg.validate()?;
    create_dir(out)?;
    let manifest = ExperimentManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        tier,
        seed: cfg.seed,
        seed_source,
        config: cfg.clone(),
        train_config: train_cfg.clone(),
        paths: ManifestPaths {
            data_dir: cfg.data_dir.clone(),
            run_dir: out.to_path_buf(),
            config: out.join("config.toml"),
            priors: train_cfg.needs_prior().then(|| out.join("priors")),
            checkpoints: out.join("checkpoints"),
            losses: out.join("losses.csv"),
            model: out.join("model.ckpt"),
        },
    };
    eval::write_json(&out.join("manifest.json"), &manifest)?;
    write_text(&manifest.paths.config, &cfg.to_toml_string()?)?;

    let dataset = data::load_dataset(&cfg.data_dir, Split::Train)?;
    let pretrained = match &manifest.paths.priors {
        Some(dir) => {
            eprintln!("pretraining prior model on {} images", dataset.len());
            let pre = train::pretrain_prior_model(&dataset, &train_cfg)?;
            pre.priors.save(dir)?;
            train::write_loss_csv(&out.join("pretrain_losses.csv"), &pre.losses)?;
            let meta = CheckpointMeta {
                global_step: pre.losses.len() as u64,
                metadata: serde_json::json!({"phase": "pretrain", "train_config": train_cfg}),
            };
            net::save_checkpoint(&out.join("pretrain.ckpt"), &pre.model, &meta)?;
            Some(pre)
        }
        None => None,
    };
    eprintln!("training tier {tier} on {} images", dataset.len());
    let warm = pretrained.as_ref().filter(|_| train_cfg.warm_start).map(|p| &p.model);
    let outcome = train::train_multitask(
        &dataset,
        pretrained.as_ref().map(|p| &p.priors),
        &train_cfg,
        warm,
        Some(out),
    )?;
    let meta = CheckpointMeta {
        global_step: outcome.losses.len() as u64,
        metadata: serde_json::json!({"phase": "final", "tier": tier, "train_config": train_cfg}),
    };
    net::save_checkpoint(&manifest.paths.model, &outcome.model, &meta)?;
    if let Some(last) = outcome.losses.last() {
        eprintln!("final loss {:.5}", last.l_t);
    }
    Ok(manifest)
}

struct EvalSettings {
    postprocess: PostprocParams,
    radius: f64,
    radii: Vec<f64>,
}

fn eval_settings(args: &EvalArgs) -> Result<EvalSettings> {
    let cfg = match &args.config {
        Some(path) => load_config(path)?.0,
        None => ExperimentConfig::default(),
    };
    let mut postprocess = cfg.postprocess();
    if let Some(d) = args.min_distance {
        postprocess.min_distance = d;
    }
    if let Some(t) = args.threshold {
        postprocess.prob_threshold = t;
    }
    postprocess.class_exclusive |= args.class_exclusive;
    postprocess.validate()?;
    let radius = args.radius.unwrap_or(cfg.eval_radius);
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius {radius} must be positive")));
    }
    let radii = args.radii.clone().unwrap_or(cfg.sweep_radii);
    Ok(EvalSettings {
        postprocess,
        radius,
        radii,
    })
}

fn detect_all(model: &net::Model, dataset: &Dataset, params: &PostprocParams) -> Result<Vec<DetectionSet>> {
    dataset
        .records
        .iter()
        .map(|r| detect::detect_cells(model, &r.pixels, params))
        .collect()
}

/// `eval` writes detections, the F1 report and the sweep; `sweep` only the sweep.
pub fn cmd_eval(args: &EvalArgs, full: bool) -> Result<()> {
    let settings = eval_settings(args)?;
    let (model, _) = net::load_checkpoint(&args.ckpt, None)?;
    let dataset = data::load_dataset(&args.data, args.split)?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("split '{}' is empty", args.split)));
    }
    let out = args.out.clone().unwrap_or_else(|| {
        let dir = args.ckpt.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval_{}", args.split))
    });
    create_dir(&out)?;
    let detections = detect_all(&model, &dataset, &settings.postprocess)?;
    let gts: Vec<_> = dataset.records.iter().map(|r| r.annotations.clone()).collect();
    let sweep = eval::radius_sweep(&detections, &gts, &settings.radii)?;
    eval::write_sweep_csv(&out.join("sweep.csv"), &sweep)?;
    if full {
        let ids: Vec<String> = dataset.records.iter().map(|r| r.id.clone()).collect();
        detect::write_detections_csv(
            &out.join("detections.csv"),
            ids.iter().map(String::as_str).zip(detections.iter().map(Vec::as_slice)),
        )?;
        let reports: Vec<_> = detections
            .iter()
            .zip(&gts)
            .map(|(d, g)| eval::match_detections(d, g, settings.radius))
            .collect();
        let report = eval::f1_report(&ids, &reports, settings.postprocess)?;
        eval::write_json(&out.join("f1.json"), &report)?;
        eprintln!(
            "r={}: totalF1(P)={:.4} totalF1(N)={:.4} meanF1(P)={:.4} meanF1(N)={:.4}",
            settings.radius, report.total_f1_p, report.total_f1_n, report.mean_f1_p, report.mean_f1_n
        );
    }
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Splits `LABEL=FILE`; a bare `FILE` is labelled by its parent directory name.
pub fn parse_sweep_arg(arg: &str) -> (String, PathBuf) {
    if let Some((label, path)) = arg.split_once('=') {
        if !label.is_empty() {
            return (label.to_string(), PathBuf::from(path));
        }
    }
    let path = PathBuf::from(arg);
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    (label, path)
}

pub fn cmd_plot(sweeps: &[String], out: &Path) -> Result<()> {
    let series = sweeps
        .iter()
        .map(|arg| {
            let (label, path) = parse_sweep_arg(arg);
            eval::read_sweep_csv(&path).map(|rows| SweepSeries { label, rows })
        })
        .collect::<Result<Vec<_>>>()?;
    plot::plot_sweeps(&series, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_labels() {
        assert_eq!(parse_sweep_arg("ours=a/b.csv"), ("ours".into(), PathBuf::from("a/b.csv")));
        assert_eq!(parse_sweep_arg("runs/ours++/sweep.csv").0, "ours++");
        assert_eq!(parse_sweep_arg("sweep.csv").0, "sweep");
    }

    #[test]
    fn parses_documented_invocations() {
        Cli::try_parse_from(["cytocount", "synth", "-c", "cfg.toml", "--out", "d"]).unwrap();
        Cli::try_parse_from(["cytocount", "train", "-c", "cfg.toml", "--tier", "ours+", "--out", "r"]).unwrap();
        let cli = Cli::try_parse_from([
            "cytocount",
            "eval",
            "--ckpt",
            "m.ckpt",
            "--data",
            "d",
            "--split",
            "test",
            "--radii",
            "4,6,8,10,12,14,16",
            "--min-distance",
            "6",
            "--threshold",
            "0.5",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(args) => {
                assert_eq!(args.radii.unwrap(), vec![4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0]);
                assert_eq!(args.split, Split::Test);
            }
            other => panic!("{other:?}"),
        }
        Cli::try_parse_from(["cytocount", "plot", "--sweep", "s.csv", "--out", "p.svg"]).unwrap();
        assert!(Cli::try_parse_from(["cytocount", "train", "-c", "x", "--tier", "best", "--out", "r"]).is_err());
    }

    #[test]
    fn seeds_do_not_overlap() {
        let cfg = ExperimentConfig {
            seed: 3,
            ..Default::default()
        };
        let (train, test) = synth_seeds(&cfg).unwrap();
        assert_eq!(test - train, cfg.n_train as u64);
        let huge = ExperimentConfig {
            seed: u64::MAX,
            ..Default::default()
        };
        assert!(synth_seeds(&huge).is_err());
    }
}
