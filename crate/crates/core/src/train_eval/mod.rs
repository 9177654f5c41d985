//! Training, evaluation and the comparison metrics.

mod histogram;
mod metrics;
mod sweep;
mod train;

use serde::{Deserialize, Serialize};

pub use histogram::{prediction_time_histogram, PredictionTimeHistogram, SampleResult, DEFAULT_BIN_WIDTH_S};
pub use metrics::{accuracy, delta_acc, per_class_metrics, ClassMetrics, ConfusionMatrix};
pub use sweep::{parse_grid, run_cell, sweep, CellOutcome, GridCell, SweepConfig};
pub use train::{confusion_of, eval_loss, evaluate, evaluate_samples, train, EpochRecord, TrainConfig, TrainHistory};

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Arch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Everything reported for one (architecture, grid cell) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arch: Arch,
    pub config: String,
    pub obs_window_s: f64,
    pub max_pred_time_s: f64,
    pub seed: u64,
    pub train_acc: f64,
    /// Test accuracy.
    pub acc: f64,
    pub delta_acc: f64,
    pub recall: [f64; 3],
    pub precision: [f64; 3],
    pub f1: [f64; 3],
    pub degenerate: [bool; 3],
    pub confusion: ConfusionMatrix,
    pub split_sizes: SplitSizes,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub histogram: PredictionTimeHistogram,
}

/// Inputs of [`MetricsReport::new`] that do not come from the evaluation.
#[derive(Clone, Debug)]
pub struct ReportContext {
    pub arch: Arch,
    pub config: String,
    pub obs_window_s: f64,
    pub max_pred_time_s: f64,
    pub seed: u64,
    pub split_sizes: SplitSizes,
    pub bin_width_s: f64,
}

impl MetricsReport {
    pub fn new(
        ctx: ReportContext,
        train_cm: &ConfusionMatrix,
        test: &[SampleResult],
        history: &TrainHistory,
    ) -> Result<MetricsReport> {
        let confusion = confusion_of(test);
        let train_acc = accuracy(train_cm)?;
        let acc = accuracy(&confusion)?;
        let m = per_class_metrics(&confusion);
        let histogram = prediction_time_histogram(test, ctx.max_pred_time_s, ctx.bin_width_s)?;
        Ok(MetricsReport {
            arch: ctx.arch,
            config: ctx.config,
            obs_window_s: ctx.obs_window_s,
            max_pred_time_s: ctx.max_pred_time_s,
            seed: ctx.seed,
            train_acc,
            acc,
            delta_acc: delta_acc(train_acc, acc),
            recall: m.recall,
            precision: m.precision,
            f1: m.f1,
            degenerate: m.degenerate,
            confusion,
            split_sizes: ctx.split_sizes,
            epochs_run: history.epochs.len(),
            best_epoch: history.best_epoch,
            histogram,
        })
    }

    /// File stem used for per-cell outputs, e.g. `tn2_o2_p3`.
    pub fn stem(&self) -> String {
        format!("{}_o{}_p{}", self.config, self.obs_window_s, self.max_pred_time_s)
    }
}

pub const CSV_HEADER: [&str; 16] = [
    "config",
    "obs_window_s",
    "max_pred_time_s",
    "seed",
    "acc",
    "delta_acc",
    "train_acc",
    "f1_lk",
    "f1_llc",
    "f1_rlc",
    "recall_lk",
    "recall_llc",
    "recall_rlc",
    "precision_lk",
    "precision_llc",
    "precision_rlc",
];

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

/// One flat row per report in the result-table layout.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    w.write_record(CSV_HEADER).map_err(Error::csv(path))?;
    for r in reports {
        let mut row = vec![
            r.config.clone(),
            r.obs_window_s.to_string(),
            r.max_pred_time_s.to_string(),
            r.seed.to_string(),
            pct(r.acc),
            pct(r.delta_acc),
            pct(r.train_acc),
        ];
        row.extend(r.f1.iter().chain(&r.recall).chain(&r.precision).map(|v| pct(*v)));
        w.write_record(&row).map_err(Error::csv(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(Error::json(path))?;
    std::fs::write(path, json + "\n").map_err(Error::io(path))
}

pub fn read_report_json(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}
