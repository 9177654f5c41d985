use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmentation::Label;

pub const DEFAULT_BIN_WIDTH_S: f64 = 0.25;

/// Outcome of classifying one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub truth: Label,
    pub predicted: Label,
    pub prediction_time_s: Option<f64>,
}

/// Prediction times of the lane-change samples: all of them, and those
/// classified correctly. Bin `k` covers `(edges[k], edges[k + 1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTimeHistogram {
    pub bin_width_s: f64,
    pub bin_edges: Vec<f64>,
    pub total_counts: Vec<u64>,
    pub correct_counts: Vec<u64>,
}

impl PredictionTimeHistogram {
    pub fn bins(&self) -> usize {
        self.total_counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total_counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        self.correct_counts.iter().sum()
    }

    /// CSV with columns `bin_start,bin_end,total,correct`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
        w.write_record(["bin_start", "bin_end", "total", "correct"])
            .map_err(Error::csv(path))?;
        for k in 0..self.bins() {
            w.write_record([
                self.bin_edges[k].to_string(),
                self.bin_edges[k + 1].to_string(),
                self.total_counts[k].to_string(),
                self.correct_counts[k].to_string(),
            ])
            .map_err(Error::csv(path))?;
        }
        w.flush().map_err(Error::io(path))
    }
}

/// Bins the LC samples of `results` over `(0, max_pred_time_s]`. LK samples
/// are ignored; an LC sample without a prediction time is an error.
pub fn prediction_time_histogram(
    results: &[SampleResult],
    max_pred_time_s: f64,
    bin_width_s: f64,
) -> Result<PredictionTimeHistogram> {
    if !(bin_width_s.is_finite() && bin_width_s > 0.0) {
        return Err(Error::BadBinWidth(bin_width_s));
    }
    if !(max_pred_time_s.is_finite() && max_pred_time_s > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "maximum prediction time must be positive, got {max_pred_time_s}"
        )));
    }
    // Tolerate widths that divide the range up to rounding.
    let bins = ((max_pred_time_s / bin_width_s) - 1e-9).ceil().max(1.0) as usize;
    let mut bin_edges: Vec<f64> = (0..=bins).map(|k| k as f64 * bin_width_s).collect();
    bin_edges[bins] = max_pred_time_s;
    let mut total_counts = vec![0; bins];
    let mut correct_counts = vec![0; bins];
    for r in results.iter().filter(|r| r.truth.is_lane_change()) {
        let t = r.prediction_time_s.ok_or_else(|| {
            Error::InvalidConfig("lane-change sample without a prediction time".into())
        })?;
        let k = ((t / bin_width_s).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
        total_counts[k] += 1;
        if r.predicted == r.truth {
            correct_counts[k] += 1;
        }
    }
    Ok(PredictionTimeHistogram {
        bin_width_s,
        bin_edges,
        total_counts,
        correct_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lc(t: f64, correct: bool) -> SampleResult {
        SampleResult {
            truth: Label::Llc,
            predicted: if correct { Label::Llc } else { Label::Lk },
            prediction_time_s: Some(t),
        }
    }

    #[test]
    fn all_correct_gives_identical_distributions() {
        let rs: Vec<_> = (1..=30).map(|i| lc(i as f64 * 0.1, true)).collect();
        let h = prediction_time_histogram(&rs, 3.0, 0.25).unwrap();
        assert_eq!(h.bins(), 12);
        assert_eq!(h.total_counts, h.correct_counts);
        assert_eq!(h.total(), 30);
    }

    #[test]
    fn failures_above_two_seconds_empty_the_upper_bins() {
        let times = [0.1, 0.25, 0.26, 1.0, 1.9, 2.0, 2.01, 2.5, 2.99, 3.0];
        let rs: Vec<_> = times.iter().map(|&t| lc(t, t <= 2.0)).collect();
        let h = prediction_time_histogram(&rs, 3.0, 0.5).unwrap();
        // Bins (0,.5] (.5,1] (1,1.5] (1.5,2] (2,2.5] (2.5,3].
        assert_eq!(h.total_counts, vec![3, 1, 0, 2, 2, 2]);
        assert_eq!(h.correct_counts, vec![3, 1, 0, 2, 0, 0]);
    }

    #[test]
    fn lane_keeping_is_excluded_and_bad_width_rejected() {
        let lk = SampleResult {
            truth: Label::Lk,
            predicted: Label::Lk,
            prediction_time_s: None,
        };
        let h = prediction_time_histogram(&[lk, lc(1.0, false)], 3.0, 0.25).unwrap();
        assert_eq!(h.total(), 1);
        assert_eq!(h.correct(), 0);
        assert!(matches!(prediction_time_histogram(&[], 3.0, 0.0), Err(Error::BadBinWidth(_))));
        assert!(matches!(prediction_time_histogram(&[], 3.0, f64::NAN), Err(Error::BadBinWidth(_))));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = prediction_time_histogram(&[lc(0.3, true)], 1.0, 0.5).unwrap();
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "bin_start,bin_end,total,correct\n0,0.5,1,1\n0.5,1,0,0\n");
    }
}
