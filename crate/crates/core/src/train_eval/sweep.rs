use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, evaluate_samples, train, MetricsReport, ReportContext, TrainConfig, TrainHistory, DEFAULT_BIN_WIDTH_S};
use crate::error::{Error, Result};
use crate::features::FEATURE_COUNT;
use crate::highd_io::Recording;
use crate::models::Model;
use crate::prepared::{prepare_cell, PreparedCell};
use crate::segmentation::{DatasetConfig, Split};

/// One (Δt_o, Δt_p,MAX) combination, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub obs_window_s: f64,
    pub max_pred_time_s: f64,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad grid value {v:?}")))?;
            if x.is_finite() && x > 0.0 {
                Ok(x)
            } else {
                Err(Error::InvalidConfig(format!("grid value {x} must be positive")))
            }
        })
        .collect()
}

/// Parses `"1,2,3x3,4,5,6"` (observation windows, then maximum prediction
/// times) into the cross product, observation window outermost.
pub fn parse_grid(spec: &str) -> Result<Vec<GridCell>> {
    let (obs, pred) = spec
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::InvalidConfig(format!("grid {spec:?} lacks an 'x'")))?;
    let (obs, pred) = (parse_list(obs)?, parse_list(pred)?);
    Ok(obs
        .iter()
        .flat_map(|&o| {
            pred.iter().map(move |&p| GridCell {
                obs_window_s: o,
                max_pred_time_s: p,
            })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub configs: Vec<String>,
    pub grid: Vec<GridCell>,
    pub seed: u64,
    pub train: TrainConfig,
    pub bin_width_s: f64,
    /// Upper bound on concurrently trained models; 0 lets rayon decide.
    pub workers: usize,
}

impl SweepConfig {
    pub fn new(configs: Vec<String>, grid: Vec<GridCell>, seed: u64) -> SweepConfig {
        SweepConfig {
            configs,
            grid,
            seed,
            train: TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            bin_width_s: DEFAULT_BIN_WIDTH_S,
            workers: 0,
        }
    }
}

pub struct CellOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub history: TrainHistory,
}

/// Trains `config_name` on a prepared cell and evaluates it on the train and
/// test splits.
pub fn run_cell(cell: &PreparedCell, config_name: &str, tc: &TrainConfig, seed: u64, bin_width_s: f64) -> Result<CellOutcome> {
    let [train_set, val_set, test_set] = Split::ALL.map(|s| cell.normalized(s));
    let mut model = Model::from_name(config_name, cell.rows(), FEATURE_COUNT, seed)?;
    let history = train(&mut model, &train_set, &val_set, tc)?;
    let train_cm = evaluate(&model, &train_set)?;
    let test = evaluate_samples(&model, &test_set)?;
    let ctx = ReportContext {
        arch: model.arch(),
        config: model.name.clone(),
        obs_window_s: cell.config.obs_window_s,
        max_pred_time_s: cell.config.max_pred_time_s,
        seed,
        split_sizes: cell.sizes(),
        bin_width_s,
    };
    let report = MetricsReport::new(ctx, &train_cm, &test, &history)?;
    Ok(CellOutcome { report, model, history })
}

/// Every (cell, configuration) pair, cell-major in the order given. Cells
/// are built once and shared by all configurations, so every architecture
/// sees identical segments.
pub fn sweep(recordings: &[Recording], cfg: &SweepConfig) -> Result<Vec<MetricsReport>> {
    if cfg.configs.is_empty() || cfg.grid.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one configuration and one grid cell".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    pool.install(|| {
        let cells: Vec<PreparedCell> = cfg
            .grid
            .par_iter()
            .map(|g| prepare_cell(recordings, &DatasetConfig::new(g.obs_window_s, g.max_pred_time_s, cfg.seed)?))
            .collect::<Result<_>>()?;
        let jobs: Vec<(&PreparedCell, &String)> = cells
            .iter()
            .flat_map(|c| cfg.configs.iter().map(move |name| (c, name)))
            .collect();
        jobs.par_iter()
            .map(|(cell, name)| {
                let out = run_cell(cell, name, &cfg.train, cfg.seed, cfg.bin_width_s)?;
                log::info!(
                    "{} o={} p={}: acc {:.2}",
                    name,
                    cell.config.obs_window_s,
                    cell.config.max_pred_time_s,
                    out.report.acc
                );
                Ok(out.report)
            })
            .collect()
    })
}
