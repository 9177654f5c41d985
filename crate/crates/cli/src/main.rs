mod report;
mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lanecast::features::FEATURE_COUNT;
use lanecast::highd_io::read_recording_dir;
use lanecast::models::{load_checkpoint, save_checkpoint, ModelConfig, Model};
use lanecast::prepared::{prepare_cell, read_prepared, write_prepared};
use lanecast::segmentation::{DatasetConfig, Split};
use lanecast::synthetic::{generate_corpus, SyntheticSpec};
use lanecast::train_eval::{
    evaluate, evaluate_samples, parse_grid, sweep, train, write_report_json, write_reports_csv, GridCell,
    MetricsReport, ReportContext, SweepConfig, TrainConfig, TrainHistory, DEFAULT_BIN_WIDTH_S,
};

#[derive(Parser)]
#[command(name = "lanecast", version, about = "Lane-change intention prediction on highD-style data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus in the highD CSV layout.
    Generate {
        /// JSON synthetic spec; omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for the recording CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, balance and split a corpus and store the feature matrices.
    Prepare {
        /// Directory of highD-style recording CSVs.
        #[arg(long)]
        data: PathBuf,
        /// Observation window in seconds.
        #[arg(long)]
        obs_window: f64,
        /// Maximum prediction time in seconds.
        #[arg(long)]
        max_pred_time: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration on a prepared directory.
    Train {
        /// Configuration name, e.g. lstm2, cnn3 or tn2.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        prepared: PathBuf,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Checkpoint manifest to write; the weights go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a prepared directory.
    Evaluate {
        /// Checkpoint manifest written by train.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        /// Metrics JSON to write.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_S)]
        bin_width: f64,
    },
    /// Train and evaluate every configuration on every grid cell.
    Sweep {
        /// Comma-separated configuration names.
        #[arg(long, value_delimiter = ',', required = true)]
        archs: Vec<String>,
        /// Observation windows x maximum prediction times, e.g. 1,2,3x3,4,5,6.
        #[arg(long)]
        grid: String,
        /// Directory of highD-style recording CSVs.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BIN_WIDTH_S)]
        bin_width: f64,
        /// Output directory for one metrics JSON per run and results.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render result tables and charts from metric JSON files.
    Report {
        /// Directory of metrics JSON files.
        #[arg(long)]
        results: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also draw a prediction-time histogram per report.
        #[arg(long)]
        histograms: bool,
    },
}

/// A problem with the flags themselves, reported with exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut tc: TrainConfig = match path {
        Some(p) => read_json(p).map_err(|e| usage(format!("{e:#}")))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        tc.seed = seed;
    }
    if tc.batch_size == 0 || tc.max_epochs == 0 {
        return Err(usage("batch_size and max_epochs must be positive"));
    }
    Ok(tc)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(usage(format!("--{name} must be a positive number, got {v}")))
    }
}

fn check_config(name: &str) -> Result<()> {
    ModelConfig::by_name(name).map(|_| ()).map_err(|e| usage(e.to_string()))
}

fn workers() -> Result<usize> {
    match std::env::var("LANECAST_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("LANECAST_WORKERS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("history.json")
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate { spec, seed, out } => {
            let mut s: SyntheticSpec = match &spec {
                Some(p) => read_json(p).map_err(|e| usage(format!("{e:#}")))?,
                None => SyntheticSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = seed;
            }
            s.validate().map_err(|e| usage(e.to_string()))?;
            let files = generate_corpus(&s, &out)?;
            log::info!("wrote {} recordings ({} tracks) to {}", files.len(), s.n_tracks, out.display());
        }
        Command::Prepare {
            data,
            obs_window,
            max_pred_time,
            seed,
            out,
        } => {
            check_positive("obs-window", obs_window)?;
            check_positive("max-pred-time", max_pred_time)?;
            let cfg = DatasetConfig::new(obs_window, max_pred_time, seed).map_err(|e| usage(e.to_string()))?;
            let recordings = read_recording_dir(&data)?;
            let cell = prepare_cell(&recordings, &cfg)?;
            let info = write_prepared(&cell, &out)?;
            log::info!(
                "split sizes train {} / val {} / test {}; train LK {} / LLC {} / RLC {}",
                info.sizes.train,
                info.sizes.val,
                info.sizes.test,
                info.train_counts.lk,
                info.train_counts.llc,
                info.train_counts.rlc
            );
        }
        Command::Train {
            arch,
            prepared,
            train_config: tc_path,
            out,
        } => {
            check_config(&arch)?;
            let tc = train_config(tc_path.as_deref(), None)?;
            let data = read_prepared(&prepared)?;
            let mut model = Model::from_name(&arch, data.info.rows, FEATURE_COUNT, tc.seed)?;
            let history = train(&mut model, &data.normalized(Split::Train), &data.normalized(Split::Val), &tc)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            save_checkpoint(&model, Some(&data.normalizer), &out)?;
            write_json(&history_path(&out), &history)?;
            log::info!(
                "{arch}: {} epochs, best epoch {}, checkpoint {}",
                history.epochs.len(),
                history.best_epoch,
                out.display()
            );
        }
        Command::Evaluate {
            ckpt,
            prepared,
            out,
            bin_width,
        } => {
            check_positive("bin-width", bin_width)?;
            let (model, normalizer) = load_checkpoint(&ckpt)?;
            let data = read_prepared(&prepared)?;
            if model.n != data.info.rows {
                bail!(
                    "checkpoint expects {}-frame windows, {} holds {}",
                    model.n,
                    prepared.display(),
                    data.info.rows
                );
            }
            let norm = normalizer.unwrap_or_else(|| data.normalizer.clone());
            let apply = |split| -> Vec<_> { data.split(split).iter().map(|m| norm.apply(m)).collect() };
            let train_cm = evaluate(&model, &apply(Split::Train))?;
            let test = evaluate_samples(&model, &apply(Split::Test))?;
            let history: TrainHistory = if history_path(&ckpt).exists() {
                read_json(&history_path(&ckpt))?
            } else {
                TrainHistory::default()
            };
            let ctx = ReportContext {
                arch: model.arch(),
                config: model.name.clone(),
                obs_window_s: data.info.obs_window_s,
                max_pred_time_s: data.info.max_pred_time_s,
                seed: model.seed,
                split_sizes: data.info.sizes,
                bin_width_s: bin_width,
            };
            let report = MetricsReport::new(ctx, &train_cm, &test, &history)?;
            write_report_json(&out, &report)?;
            log::info!("{}: test accuracy {:.2}%", report.config, report.acc);
        }
        Command::Sweep {
            archs,
            grid,
            data,
            seed,
            train_config: tc_path,
            bin_width,
            out,
        } => {
            for a in &archs {
                check_config(a)?;
            }
            let cells: Vec<GridCell> = parse_grid(&grid).map_err(|e| usage(e.to_string()))?;
            check_positive("bin-width", bin_width)?;
            let mut cfg = SweepConfig::new(archs, cells, seed);
            cfg.train = train_config(tc_path.as_deref(), Some(seed))?;
            cfg.bin_width_s = bin_width;
            cfg.workers = workers()?;
            let recordings = read_recording_dir(&data)?;
            let reports = sweep(&recordings, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for r in &reports {
                write_report_json(&out.join(format!("{}.json", r.stem())), r)?;
            }
            write_reports_csv(&out.join("results.csv"), &reports)?;
            log::info!("{} reports written to {}", reports.len(), out.display());
        }
        Command::Report {
            results,
            out,
            histograms,
        } => {
            let charts = report::render(&results, &out, histograms)?;
            log::info!("{charts} charts written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
