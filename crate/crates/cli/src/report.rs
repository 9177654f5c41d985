//! Renders persisted metric JSON into tables and charts. Nothing here
//! recomputes a metric.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lanecast::train_eval::{read_report_json, write_reports_csv, MetricsReport};

use crate::svg::{bars_and_lines, overlaid_histogram, Series};

/// Every metrics report under `dir`, ordered by file name. JSON files that
/// are not reports are skipped.
pub fn load_reports(dir: &Path) -> Result<Vec<(PathBuf, MetricsReport)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match read_report_json(&p) {
            Ok(r) => out.push((p, r)),
            Err(e) => log::debug!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

fn seconds(v: f64) -> String {
    format!("{v} s")
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn write_confusion_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut body = String::from("config,obs_window_s,max_pred_time_s,true,pred_lk,pred_llc,pred_rlc\n");
    for r in reports {
        for (k, name) in ["LK", "LLC", "RLC"].iter().enumerate() {
            let c = r.confusion.counts[k];
            body.push_str(&format!(
                "{},{},{},{name},{},{},{}\n",
                r.config, r.obs_window_s, r.max_pred_time_s, c[0], c[1], c[2]
            ));
        }
    }
    write(path, &body)
}

/// Writes `results.csv`, `confusion.csv`, one accuracy chart per observation
/// window and, with `histograms`, a prediction-time chart and CSV per report.
pub fn render(results: &Path, out: &Path, histograms: bool) -> Result<usize> {
    let loaded = load_reports(results)?;
    if loaded.is_empty() {
        anyhow::bail!("no metrics reports found in {}", results.display());
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let reports: Vec<MetricsReport> = loaded.into_iter().map(|(_, r)| r).collect();
    write_reports_csv(&out.join("results.csv"), &reports)?;
    write_confusion_csv(&out.join("confusion.csv"), &reports)?;

    // Group by observation window; categories are the prediction horizons.
    let mut by_obs: BTreeMap<u64, Vec<&MetricsReport>> = BTreeMap::new();
    for r in &reports {
        by_obs.entry(r.obs_window_s.to_bits()).or_default().push(r);
    }
    let mut charts = 0;
    for (bits, group) in &by_obs {
        let obs = f64::from_bits(*bits);
        let mut horizons: Vec<f64> = group.iter().map(|r| r.max_pred_time_s).collect();
        horizons.sort_by(f64::total_cmp);
        horizons.dedup();
        let mut configs: Vec<&str> = group.iter().map(|r| r.config.as_str()).collect();
        configs.sort_unstable();
        configs.dedup();
        let series = |f: fn(&MetricsReport) -> f64| -> Vec<Series> {
            configs
                .iter()
                .map(|c| Series {
                    name: c.to_string(),
                    values: horizons
                        .iter()
                        .map(|h| {
                            group
                                .iter()
                                .find(|r| r.config == *c && r.max_pred_time_s == *h)
                                .map(|r| f(r))
                        })
                        .collect(),
                })
                .collect()
        };
        let svg = bars_and_lines(
            &format!("Accuracy and overfitting, observation window {}", seconds(obs)),
            &horizons.iter().map(|h| seconds(*h)).collect::<Vec<_>>(),
            "maximum prediction time",
            &series(|r| r.acc),
            "Acc (%)",
            &series(|r| r.delta_acc),
            "dAcc (pp)",
        );
        write(&out.join(format!("acc_o{obs}.svg")), &svg)?;
        charts += 1;
    }
    if histograms {
        for r in &reports {
            let h = &r.histogram;
            let svg = overlaid_histogram(
                &format!(
                    "Prediction times, {} ({} / {})",
                    r.config,
                    seconds(r.obs_window_s),
                    seconds(r.max_pred_time_s)
                ),
                &h.bin_edges,
                &h.total_counts,
                &h.correct_counts,
            );
            write(&out.join(format!("hist_{}.svg", r.stem())), &svg)?;
            h.write_csv(&out.join(format!("hist_{}.csv", r.stem())))?;
            charts += 1;
        }
    }
    Ok(charts)
}
