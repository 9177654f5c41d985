//! Lane-change detection, segment cutting and labelling, class balancing and
//! the train/validation/test split.
//!
//! Frame ranges are half-open: a segment covers `start_frame..end_frame`. An
//! LC segment with prediction time `Δt_p` ends exactly `round(Δt_p·f)` frames
//! before its LC instant, so `end_frame + gap = lc.frame`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::transform_ego;
use crate::highd_io::{Recording, Track};
use crate::rng::{self, tag, Rng};

/// Output class. The discriminant is the class index used by the models and
/// the confusion matrix rows/columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "LK")]
    Lk = 0,
    #[serde(rename = "LLC")]
    Llc = 1,
    #[serde(rename = "RLC")]
    Rlc = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Lk, Label::Llc, Label::Rlc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Lk => "LK",
            Label::Llc => "LLC",
            Label::Rlc => "RLC",
        }
    }

    pub fn is_lane_change(self) -> bool {
        self != Label::Lk
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Label> {
        match s {
            "LK" => Ok(Label::Lk),
            "LLC" => Ok(Label::Llc),
            "RLC" => Ok(Label::Rlc),
            other => Err(Error::InvalidConfig(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Maneuver {
    Llc,
    Rlc,
}

impl From<Maneuver> for Label {
    fn from(m: Maneuver) -> Label {
        match m {
            Maneuver::Llc => Label::Llc,
            Maneuver::Rlc => Label::Rlc,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LcInstant {
    pub track_id: i64,
    /// First frame whose lane id differs from the previous frame's.
    pub frame: i64,
    pub maneuver: Maneuver,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub recording_id: i64,
    pub track_id: i64,
    pub start_frame: i64,
    /// Exclusive.
    pub end_frame: i64,
    pub label: Label,
    /// Present iff the label is a lane change.
    pub prediction_time_s: Option<f64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        (self.end_frame - self.start_frame) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.end_frame <= self.start_frame
    }

    pub fn contains_frame(&self, frame: i64) -> bool {
        (self.start_frame..self.end_frame).contains(&frame)
    }

    fn sort_key(&self) -> (i64, i64, i64, Label) {
        (self.recording_id, self.track_id, self.start_frame, self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Observation window Δt_o in seconds.
    pub obs_window_s: f64,
    /// Maximum prediction time Δt_p,MAX in seconds.
    pub max_pred_time_s: f64,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(obs_window_s: f64, max_pred_time_s: f64, seed: u64) -> Result<Self> {
        let cfg = DatasetConfig {
            obs_window_s,
            max_pred_time_s,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.obs_window_s) && ok(self.max_pred_time_s) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "observation window and maximum prediction time must be positive, got {} s and {} s",
                self.obs_window_s, self.max_pred_time_s
            )))
        }
    }

    /// Samples per observation window, `n = round(Δt_o·f)`.
    pub fn window_frames(&self, fps: f64) -> i64 {
        seconds_to_frames(self.obs_window_s, fps)
    }

    pub fn max_gap_frames(&self, fps: f64) -> i64 {
        seconds_to_frames(self.max_pred_time_s, fps)
    }

    /// History an LC instant needs before it is eligible.
    pub fn required_history_frames(&self, fps: f64) -> i64 {
        seconds_to_frames(self.obs_window_s + self.max_pred_time_s, fps)
    }
}

/// Whole frames in `seconds`, rounding halves up.
pub fn seconds_to_frames(seconds: f64, fps: f64) -> i64 {
    (seconds * fps + 0.5).floor() as i64
}

pub fn detect_lc_instants(track: &Track) -> Result<Vec<LcInstant>> {
    let mut out = Vec::new();
    for pair in track.states.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if prev.lane_id == cur.lane_id {
            continue;
        }
        let (_, y_prev, _, _) = transform_ego(prev, track.direction);
        let (_, y_cur, _, _) = transform_ego(cur, track.direction);
        let maneuver = if y_cur > y_prev {
            Maneuver::Llc
        } else if y_cur < y_prev {
            Maneuver::Rlc
        } else {
            return Err(Error::AmbiguousManeuver {
                track_id: track.track_id,
                frame: cur.frame,
            });
        };
        out.push(LcInstant {
            track_id: track.track_id,
            frame: cur.frame,
            maneuver,
        });
    }
    Ok(out)
}

/// Whether `lc` has at least Δt_o + Δt_p,MAX of history before it. Depends
/// on the two times only through their sum.
pub fn is_eligible(track: &Track, lc: &LcInstant, cfg: &DatasetConfig, fps: f64) -> bool {
    lc.frame - track.first_frame() >= cfg.required_history_frames(fps)
}

/// Draws Δt_p uniformly from (0, Δt_p,MAX] and cuts the window that ends
/// `round(Δt_p·f)` frames before `lc`. Returns `None` when the instant lacks
/// history or the window holds another LC instant.
pub fn sample_lc_segment(
    track: &Track,
    recording_id: i64,
    instants: &[LcInstant],
    lc: &LcInstant,
    cfg: &DatasetConfig,
    fps: f64,
    rng: &mut Rng,
) -> Option<Segment> {
    // Draw before the eligibility check so the stream position never depends
    // on the outcome.
    let u: f64 = rng.gen();
    if !is_eligible(track, lc, cfg, fps) {
        return None;
    }
    let prediction_time_s = cfg.max_pred_time_s * (1.0 - u);
    let gap = seconds_to_frames(prediction_time_s, fps);
    let n = cfg.window_frames(fps);
    let end_frame = lc.frame - gap;
    let start_frame = end_frame - n;
    if start_frame < track.first_frame() {
        return None;
    }
    let segment = Segment {
        recording_id,
        track_id: track.track_id,
        start_frame,
        end_frame,
        label: lc.maneuver.into(),
        prediction_time_s: Some(prediction_time_s),
    };
    if instants.iter().any(|other| segment.contains_frame(other.frame)) {
        return None;
    }
    Some(segment)
}

/// Whether the LK window `start..start+n` is acceptable: it holds no LC
/// instant and does not end within `[0, Δt_p,MAX]` before one (the range an
/// LC window could occupy).
pub fn is_valid_lk_window(start: i64, n: i64, instants: &[LcInstant], max_gap_frames: i64) -> bool {
    let end = start + n;
    instants.iter().all(|lc| {
        let inside = (start..end).contains(&lc.frame);
        let gap = lc.frame - end;
        !inside && !(0..=max_gap_frames).contains(&gap)
    })
}

/// Picks at most one LK window per track, uniformly among the valid ones.
pub fn sample_lk_segment(
    track: &Track,
    recording_id: i64,
    instants: &[LcInstant],
    cfg: &DatasetConfig,
    fps: f64,
    rng: &mut Rng,
) -> Option<Segment> {
    let n = cfg.window_frames(fps);
    let max_gap = cfg.max_gap_frames(fps);
    let candidates: Vec<i64> = (track.first_frame()..=track.end_frame() - n)
        .filter(|&s| is_valid_lk_window(s, n, instants, max_gap))
        .collect();
    let &start_frame = candidates.choose(rng)?;
    Some(Segment {
        recording_id,
        track_id: track.track_id,
        start_frame,
        end_frame: start_frame + n,
        label: Label::Lk,
        prediction_time_s: None,
    })
}

/// All LC and LK segments of one track.
pub fn track_segments(
    track: &Track,
    recording_id: i64,
    cfg: &DatasetConfig,
    fps: f64,
) -> Result<Vec<Segment>> {
    let instants = detect_lc_instants(track)?;
    let key = |extra: &[u64]| {
        let mut keys = vec![recording_id as u64, track.track_id as u64];
        keys.extend_from_slice(extra);
        keys
    };
    let mut out = Vec::new();
    for lc in &instants {
        let mut rng = rng::stream(cfg.seed, &key(&[tag::LC_DRAW, lc.frame as u64]));
        if let Some(s) = sample_lc_segment(track, recording_id, &instants, lc, cfg, fps, &mut rng) {
            out.push(s);
        }
    }
    let mut rng = rng::stream(cfg.seed, &key(&[tag::LK_DRAW]));
    if let Some(s) = sample_lk_segment(track, recording_id, &instants, cfg, fps, &mut rng) {
        out.push(s);
    }
    Ok(out)
}

/// Segments of every track of every recording, in canonical order.
pub fn extract_segments(recordings: &[Recording], cfg: &DatasetConfig) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let per_track: Vec<Vec<Segment>> = recordings
        .iter()
        .flat_map(|rec| rec.tracks.iter().map(move |t| (rec, t)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(rec, t)| track_segments(t, rec.meta.recording_id, cfg, rec.meta.frame_rate_hz))
        .collect::<Result<_>>()?;
    let mut out: Vec<Segment> = per_track.into_iter().flatten().collect();
    out.sort_by_key(Segment::sort_key);
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub lk: usize,
    pub llc: usize,
    pub rlc: usize,
}

impl ClassCounts {
    pub fn of(segments: &[Segment]) -> Self {
        let mut c = ClassCounts::default();
        for s in segments {
            match s.label {
                Label::Lk => c.lk += 1,
                Label::Llc => c.llc += 1,
                Label::Rlc => c.rlc += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.lk + self.llc + self.rlc
    }
}

/// LK count kept by [`balance_classes`] for the given class counts.
pub fn balanced_lk_count(counts: ClassCounts) -> usize {
    counts.lk.min(counts.llc + counts.rlc)
}

/// Keeps every LC segment and a uniform random subset of LK segments of size
/// `min(#LK, #LLC + #RLC)`. Relative order is preserved.
pub fn balance_classes(segments: Vec<Segment>, rng: &mut Rng) -> Vec<Segment> {
    let counts = ClassCounts::of(&segments);
    let target = balanced_lk_count(counts);
    let lk_positions: Vec<usize> = segments
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Lk)
        .map(|(i, _)| i)
        .collect();
    let mut keep = vec![true; segments.len()];
    if target < lk_positions.len() {
        for &p in &lk_positions {
            keep[p] = false;
        }
        for i in index::sample(rng, lk_positions.len(), target) {
            keep[lk_positions[i]] = true;
        }
    }
    segments
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl SplitDataset {
    pub fn get(&self, split: Split) -> &[Segment] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Sizes of a 60/20/20 split: floor for train and validation, the rest to test.
pub fn split_sizes(total: usize) -> (usize, usize, usize) {
    let train = total * 6 / 10;
    let val = total * 2 / 10;
    (train, val, total - train - val)
}

/// Seeded shuffle followed by a 60/20/20 split.
pub fn split_dataset(mut segments: Vec<Segment>, seed: u64) -> Result<SplitDataset> {
    if segments.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rng = rng::stream(seed, &[tag::SPLIT]);
    segments.shuffle(&mut rng);
    let (train, val, _) = split_sizes(segments.len());
    let test = segments.split_off(train + val);
    let val = segments.split_off(train);
    Ok(SplitDataset {
        train: segments,
        val,
        test,
    })
}

/// Extraction, balancing and splitting for one dataset configuration.
pub fn build_dataset(recordings: &[Recording], cfg: &DatasetConfig) -> Result<SplitDataset> {
    let segments = extract_segments(recordings, cfg)?;
    let mut rng = rng::stream(cfg.seed, &[tag::BALANCE]);
    let balanced = balance_classes(segments, &mut rng);
    split_dataset(balanced, cfg.seed)
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    track_id: i64,
    start_frame: i64,
    end_frame: i64,
    label: Label,
    prediction_time_s: Option<f64>,
    split: Split,
}

/// Writes `track_id,start_frame,end_frame,label,prediction_time_s,split`,
/// train rows first, then validation, then test.
pub fn write_manifest(path: &Path, split: &SplitDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::csv(path))?;
    for which in Split::ALL {
        for s in split.get(which) {
            w.serialize(ManifestRow {
                track_id: s.track_id,
                start_frame: s.start_frame,
                end_frame: s.end_frame,
                label: s.label,
                prediction_time_s: s.prediction_time_s,
                split: which,
            })
            .map_err(Error::csv(path))?;
        }
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a manifest back as `(split, segment)` rows. The recording id is not
/// part of the manifest and is set to 0.
pub fn read_manifest(path: &Path) -> Result<Vec<(Split, Segment)>> {
    let mut r = csv::Reader::from_path(path).map_err(Error::csv(path))?;
    r.deserialize::<ManifestRow>()
        .map(|row| {
            let row = row.map_err(Error::csv(path))?;
            Ok((
                row.split,
                Segment {
                    recording_id: 0,
                    track_id: row.track_id,
                    start_frame: row.start_frame,
                    end_frame: row.end_frame,
                    label: row.label,
                    prediction_time_s: row.prediction_time_s,
                },
            ))
        })
        .collect()
}
