//! Building one dataset cell and storing it on disk.
//!
//! A prepared directory holds `manifest.csv` (one row per segment, train
//! rows first, then val, then test), `samples/NNNNNN.bin` with each raw
//! feature matrix as little-endian `f32` plus a `.json` sidecar describing
//! it, `normalizer.json` fitted on the train split, and `dataset.json`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{assemble_feature_matrix, column_names, FeatureMatrix, Normalizer, FEATURE_COUNT};
use crate::highd_io::Recording;
use crate::segmentation::{build_dataset, write_manifest, ClassCounts, DatasetConfig, Label, Segment, Split, SplitDataset};
use crate::train_eval::SplitSizes;

pub const PREPARED_FORMAT: u32 = 1;

/// A dataset cell with raw features for every split.
#[derive(Clone, Debug)]
pub struct PreparedCell {
    pub config: DatasetConfig,
    pub frame_rate_hz: f64,
    pub segments: SplitDataset,
    pub train: Vec<FeatureMatrix>,
    pub val: Vec<FeatureMatrix>,
    pub test: Vec<FeatureMatrix>,
    pub normalizer: Normalizer,
}

impl PreparedCell {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }

    /// Window length in frames.
    pub fn rows(&self) -> usize {
        self.config.window_frames(self.frame_rate_hz) as usize
    }

    pub fn features(&self, split: Split) -> &[FeatureMatrix] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// The split with the train-fit normalizer applied.
    pub fn normalized(&self, split: Split) -> Vec<FeatureMatrix> {
        self.features(split).iter().map(|m| self.normalizer.apply(m)).collect()
    }
}

fn common_frame_rate(recordings: &[Recording]) -> Result<f64> {
    let first = recordings.first().ok_or(Error::EmptyInput)?.meta.frame_rate_hz;
    if recordings.iter().any(|r| r.meta.frame_rate_hz != first) {
        return Err(Error::InvalidRecording(
            "recordings with different frame rates cannot share a dataset".into(),
        ));
    }
    Ok(first)
}

fn assemble(segments: &[Segment], by_id: &HashMap<i64, &Recording>) -> Result<Vec<FeatureMatrix>> {
    segments
        .par_iter()
        .map(|s| {
            let rec = by_id.get(&s.recording_id).ok_or_else(|| {
                Error::InvalidRecording(format!("segment refers to unknown recording {}", s.recording_id))
            })?;
            assemble_feature_matrix(s, rec)
        })
        .collect()
}

/// Segments, balances and splits `recordings`, then assembles the feature
/// matrices and fits the normalizer on the train split.
pub fn prepare_cell(recordings: &[Recording], config: &DatasetConfig) -> Result<PreparedCell> {
    let frame_rate_hz = common_frame_rate(recordings)?;
    let segments = build_dataset(recordings, config)?;
    let by_id: HashMap<i64, &Recording> = recordings.iter().map(|r| (r.meta.recording_id, r)).collect();
    let train = assemble(&segments.train, &by_id)?;
    let val = assemble(&segments.val, &by_id)?;
    let test = assemble(&segments.test, &by_id)?;
    let normalizer = Normalizer::fit(&train)?;
    Ok(PreparedCell {
        config: *config,
        frame_rate_hz,
        segments,
        train,
        val,
        test,
        normalizer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub index: usize,
    pub split: Split,
    pub shape: [usize; 2],
    pub columns: Vec<String>,
    pub label: Label,
    pub prediction_time_s: Option<f64>,
    pub recording_id: i64,
    pub track_id: i64,
    pub start_frame: i64,
    pub end_frame: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub format: u32,
    pub obs_window_s: f64,
    pub max_pred_time_s: f64,
    pub seed: u64,
    pub frame_rate_hz: f64,
    pub rows: usize,
    pub columns: usize,
    pub sizes: SplitSizes,
    pub train_counts: ClassCounts,
    pub val_counts: ClassCounts,
    pub test_counts: ClassCounts,
}

/// A prepared directory read back into memory.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub info: DatasetInfo,
    pub normalizer: Normalizer,
    pub samples: Vec<(SampleSidecar, FeatureMatrix)>,
}

impl PreparedData {
    /// Raw matrices of one split, in manifest order.
    pub fn split(&self, split: Split) -> Vec<FeatureMatrix> {
        self.samples
            .iter()
            .filter(|(s, _)| s.split == split)
            .map(|(_, m)| m.clone())
            .collect()
    }

    pub fn normalized(&self, split: Split) -> Vec<FeatureMatrix> {
        self.split(split).iter().map(|m| self.normalizer.apply(m)).collect()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, json + "\n").map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

fn sample_path(dir: &Path, index: usize, ext: &str) -> PathBuf {
    dir.join("samples").join(format!("{index:06}.{ext}"))
}

pub fn write_prepared(cell: &PreparedCell, dir: &Path) -> Result<DatasetInfo> {
    let samples_dir = dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(Error::io(&samples_dir))?;
    write_manifest(&dir.join("manifest.csv"), &cell.segments)?;
    let mut index = 0;
    for split in Split::ALL {
        for (seg, fm) in cell.segments.get(split).iter().zip(cell.features(split)) {
            let bytes: Vec<u8> = fm.values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            let bin = sample_path(dir, index, "bin");
            fs::write(&bin, bytes).map_err(Error::io(&bin))?;
            let sidecar = SampleSidecar {
                index,
                split,
                shape: [fm.rows, FEATURE_COUNT],
                columns: column_names().to_vec(),
                label: fm.label,
                prediction_time_s: fm.prediction_time_s,
                recording_id: seg.recording_id,
                track_id: seg.track_id,
                start_frame: seg.start_frame,
                end_frame: seg.end_frame,
            };
            write_json(&sample_path(dir, index, "json"), &sidecar)?;
            index += 1;
        }
    }
    write_json(&dir.join("normalizer.json"), &cell.normalizer)?;
    let info = DatasetInfo {
        format: PREPARED_FORMAT,
        obs_window_s: cell.config.obs_window_s,
        max_pred_time_s: cell.config.max_pred_time_s,
        seed: cell.config.seed,
        frame_rate_hz: cell.frame_rate_hz,
        rows: cell.rows(),
        columns: FEATURE_COUNT,
        sizes: cell.sizes(),
        train_counts: ClassCounts::of(&cell.segments.train),
        val_counts: ClassCounts::of(&cell.segments.val),
        test_counts: ClassCounts::of(&cell.segments.test),
    };
    write_json(&dir.join("dataset.json"), &info)?;
    Ok(info)
}

pub fn read_prepared(dir: &Path) -> Result<PreparedData> {
    let info: DatasetInfo = read_json(&dir.join("dataset.json"))?;
    if info.format != PREPARED_FORMAT {
        return Err(Error::InvalidConfig(format!(
            "{}: unsupported prepared format {}",
            dir.display(),
            info.format
        )));
    }
    let normalizer: Normalizer = read_json(&dir.join("normalizer.json"))?;
    let total = info.sizes.train + info.sizes.val + info.sizes.test;
    let samples = (0..total)
        .into_par_iter()
        .map(|index| {
            let sidecar: SampleSidecar = read_json(&sample_path(dir, index, "json"))?;
            let bin = sample_path(dir, index, "bin");
            let bytes = fs::read(&bin).map_err(Error::io(&bin))?;
            let [rows, cols] = sidecar.shape;
            if cols != FEATURE_COUNT || bytes.len() != 4 * rows * cols {
                return Err(Error::shape(
                    "prepared sample",
                    format!("{}: {} bytes for shape {:?}", bin.display(), bytes.len(), sidecar.shape),
                ));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let fm = FeatureMatrix::new(rows, values, sidecar.label, sidecar.prediction_time_s)?;
            Ok((sidecar, fm))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        info,
        normalizer,
        samples,
    })
}
