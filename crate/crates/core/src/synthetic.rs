//! Seeded highway corpora in the highD layout.
//!
//! Vehicles drive at a near-constant speed in the centre of their lane. A
//! lane-changing vehicle follows a logistic lateral profile whose 10–90 %
//! rise takes `lc_duration_s` and which crosses the lane marking exactly on
//! a frame, so the lane id flips on that frame. Neighbor ids are recomputed
//! every frame from the vehicles present on the carriageway.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FEATURE_COUNT};
use crate::highd_io::{
    write_recording, Direction, NeighborRole, Recording, RecordingFiles, RecordingMeta, Track, TrackState,
};
use crate::rng::{self, tag};
use crate::segmentation::{Label, Maneuver};

pub const LANE_WIDTH_M: f64 = 3.75;
/// Longitudinal gap within which a side vehicle counts as alongside.
pub const ALONGSIDE_M: f64 = 5.0;
const FIRST_MARKING_M: f64 = 6.0;
const MEDIAN_M: f64 = 2.0;
/// Frame-to-frame correlation of the lateral wander.
const WANDER_RHO: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_tracks: usize,
    pub tracks_per_recording: usize,
    pub lanes_per_direction: usize,
    /// Length of every track.
    pub duration_s: f64,
    /// Length of a recording; tracks start at staggered frames inside it.
    pub recording_duration_s: f64,
    pub frame_rate_hz: f64,
    /// Probability that a track changes lane once.
    pub lc_probability: f64,
    /// Probability that a lane change goes to the left.
    pub left_fraction: f64,
    pub speed_range: (f64, f64),
    /// 10–90 % rise time of the lateral profile.
    pub lc_duration_s: f64,
    /// Earliest crossing time after the track's first frame.
    pub min_crossing_s: f64,
    /// Standard deviation of the per-frame speed jitter (m/s).
    pub speed_noise: f64,
    /// Standard deviation of the slow lateral wander (m); the lateral
    /// velocity jitter is five times this per second.
    pub lateral_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_tracks: 1200,
            tracks_per_recording: 200,
            lanes_per_direction: 3,
            duration_s: 16.0,
            recording_duration_s: 60.0,
            frame_rate_hz: 25.0,
            lc_probability: 0.6,
            left_fraction: 0.5,
            speed_range: (22.0, 38.0),
            lc_duration_s: 4.0,
            min_crossing_s: 10.0,
            speed_noise: 0.1,
            lateral_noise: 0.02,
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::SpecInvalid(msg.into())
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let prob = |v: f64| (0.0..=1.0).contains(&v);
        if self.n_tracks == 0 || self.tracks_per_recording == 0 {
            return Err(invalid("track counts must be positive"));
        }
        if self.lanes_per_direction == 0 {
            return Err(invalid("at least one lane per direction is needed"));
        }
        if self.lanes_per_direction < 2 && self.lc_probability > 0.0 {
            return Err(invalid("lane changes need at least two lanes per direction"));
        }
        if !prob(self.lc_probability) || !prob(self.left_fraction) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        if !positive(self.frame_rate_hz) || !positive(self.duration_s) || !positive(self.lc_duration_s) {
            return Err(invalid("frame rate, duration and lane-change duration must be positive"));
        }
        if self.recording_duration_s < self.duration_s {
            return Err(invalid("recording_duration_s is shorter than duration_s"));
        }
        let (lo, hi) = self.speed_range;
        if !(positive(lo) && hi.is_finite() && lo <= hi) {
            return Err(invalid(format!("bad speed range ({lo}, {hi})")));
        }
        if !(self.min_crossing_s >= 0.0 && self.min_crossing_s + self.lc_duration_s / 2.0 <= self.duration_s) {
            return Err(invalid("the lane change does not fit inside the track duration"));
        }
        if !(self.speed_noise >= 0.0 && self.lateral_noise >= 0.0) {
            return Err(invalid("noise levels must be non-negative"));
        }
        Ok(())
    }

    fn frames(&self, seconds: f64) -> i64 {
        (seconds * self.frame_rate_hz).round() as i64
    }

    /// Logistic time constant giving the configured 10–90 % rise time.
    fn tau(&self) -> f64 {
        self.lc_duration_s / (2.0 * 9f64.ln())
    }

    fn meta(&self, recording_id: i64) -> Result<RecordingMeta> {
        let l = self.lanes_per_direction;
        let upper: Vec<f64> = (0..=l).map(|i| FIRST_MARKING_M + i as f64 * LANE_WIDTH_M).collect();
        let start = upper[l] + MEDIAN_M;
        let lower: Vec<f64> = (0..=l).map(|i| start + i as f64 * LANE_WIDTH_M).collect();
        RecordingMeta::new(recording_id, self.frame_rate_hz, upper, lower)
    }
}

/// What the generator did with one track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackTruth {
    pub recording_id: i64,
    pub track_id: i64,
    /// First frame in the new lane, for lane-changing tracks.
    pub crossing_frame: Option<i64>,
    pub maneuver: Option<Maneuver>,
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub recordings: Vec<Recording>,
    pub truth: Vec<TrackTruth>,
}

/// Lane index (top to bottom in the image) one step to the driver's left.
fn left_of(direction: Direction, k: usize, lanes: usize) -> Option<usize> {
    match direction {
        // Upper traffic drives towards −x, so its left is +y.
        Direction::Upper => (k + 1 < lanes).then_some(k + 1),
        Direction::Lower => k.checked_sub(1),
    }
}

fn right_of(direction: Direction, k: usize, lanes: usize) -> Option<usize> {
    match direction {
        Direction::Upper => k.checked_sub(1),
        Direction::Lower => (k + 1 < lanes).then_some(k + 1),
    }
}

/// Sign taking image x to the canonical driving direction.
fn ego_direction_sign(direction: Direction) -> f64 {
    match direction {
        Direction::Upper => -1.0,
        Direction::Lower => 1.0,
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// One track without neighbor ids, plus its ground truth.
fn synth_track(spec: &SyntheticSpec, meta: &RecordingMeta, recording_id: i64, track_id: i64) -> (Track, TrackTruth) {
    let mut rng = rng::stream(spec.seed, &[tag::SYNTH_TRACK, recording_id as u64, track_id as u64]);
    let lanes = spec.lanes_per_direction;
    let n_frames = spec.frames(spec.duration_s);
    let first_frame = rng.gen_range(0..=spec.frames(spec.recording_duration_s) - n_frames);
    let direction = if rng.gen_bool(0.5) { Direction::Upper } else { Direction::Lower };
    let speed = rng.gen_range(spec.speed_range.0..=spec.speed_range.1);
    let changes = rng.gen_bool(spec.lc_probability);
    let left = rng.gen_bool(spec.left_fraction);

    // Pick a start lane that admits the intended maneuver.
    let candidates: Vec<(usize, Option<usize>)> = (0..lanes)
        .map(|k| {
            let target = match (changes, left) {
                (false, _) => None,
                (true, true) => left_of(direction, k, lanes),
                (true, false) => right_of(direction, k, lanes),
            };
            (k, target)
        })
        .filter(|(_, target)| !changes || target.is_some())
        .collect();
    let (lane, target) = candidates[rng.gen_range(0..candidates.len())];
    let crossing = target.map(|_| {
        let lo = spec.frames(spec.min_crossing_s);
        let hi = spec.frames(spec.duration_s - spec.lc_duration_s / 2.0).max(lo);
        rng.gen_range(lo..=hi)
    });

    let (markings, ids) = match direction {
        Direction::Upper => (&meta.upper_lane_markings, &meta.upper_lane_ids),
        Direction::Lower => (&meta.lower_lane_markings, &meta.lower_lane_ids),
    };
    let centre = markings[lane] + LANE_WIDTH_M / 2.0;
    let shift = target.map_or(0.0, |t| (t as f64 - lane as f64) * LANE_WIDTH_M);
    let sign = ego_direction_sign(direction);
    let speed_jitter = Normal::new(0.0, spec.speed_noise).expect("validated");
    let wander_step = Normal::new(0.0, spec.lateral_noise * (1.0 - WANDER_RHO * WANDER_RHO).sqrt()).expect("validated");
    let vy_jitter = Normal::new(0.0, 5.0 * spec.lateral_noise).expect("validated");
    let tau = spec.tau();
    let dt = 1.0 / spec.frame_rate_hz;

    let mut x = match direction {
        Direction::Lower => rng.gen_range(0.0..20.0),
        Direction::Upper => 60.0 + spec.speed_range.1 * spec.duration_s - rng.gen_range(0.0..20.0),
    };
    // Slow lateral wander around the nominal path.
    let mut wander = Vec::with_capacity(n_frames as usize);
    let mut e = Normal::new(0.0, spec.lateral_noise).expect("validated").sample(&mut rng);
    for _ in 0..n_frames {
        wander.push(e);
        e = WANDER_RHO * e + wander_step.sample(&mut rng);
    }
    if let Some(c) = crossing.filter(|&c| c > 0) {
        // The lateral position must move towards the new lane on the
        // crossing frame itself, whatever the wander does.
        let (a, b) = (c as usize - 1, c as usize);
        if (wander[b] - wander[a]) * shift < 0.0 {
            wander[b] = wander[a];
        }
    }
    let mut states = Vec::with_capacity(n_frames as usize);
    for j in 0..n_frames {
        let vx = sign * (speed + speed_jitter.sample(&mut rng));
        let (mut y, mut vy) = (centre, 0.0);
        let mut lane_id = ids[lane];
        if let (Some(c), Some(t)) = (crossing, target) {
            let z = (j - c) as f64 * dt / tau;
            let s = logistic(z);
            y += shift * s;
            vy = shift * s * (1.0 - s) / tau;
            if j >= c {
                lane_id = ids[t];
            }
        }
        states.push(TrackState {
            frame: first_frame + j,
            x,
            y: y + wander[j as usize],
            x_velocity: vx,
            y_velocity: vy + vy_jitter.sample(&mut rng),
            lane_id,
            neighbors: [None; 8],
        });
        x += vx * dt;
    }
    let maneuver = target.map(|_| if left { Maneuver::Llc } else { Maneuver::Rlc });
    let truth = TrackTruth {
        recording_id,
        track_id,
        crossing_frame: crossing.map(|c| first_frame + c),
        maneuver,
    };
    (
        Track {
            track_id,
            direction,
            states,
        },
        truth,
    )
}

struct Present {
    track: usize,
    state: usize,
    track_id: i64,
    /// Position along the canonical driving direction.
    x: f64,
}

/// Nearest vehicle ahead, behind and alongside within one lane, as seen
/// from canonical position `x`.
fn side_neighbors(lane: &[Present], x: f64, skip: usize) -> [Option<i64>; 3] {
    let mut best: [Option<(f64, i64)>; 3] = [None; 3];
    for p in lane.iter().filter(|p| p.track != skip) {
        let dx = p.x - x;
        let slot = if dx.abs() <= ALONGSIDE_M {
            1
        } else if dx > 0.0 {
            0
        } else {
            2
        };
        let key = (dx.abs(), p.track_id);
        if best[slot].is_none_or(|b| key.0 < b.0 || (key.0 == b.0 && key.1 < b.1)) {
            best[slot] = Some(key);
        }
    }
    best.map(|b| b.map(|(_, id)| id))
}

/// Fills every state's neighbor ids from the vehicles present on the same
/// carriageway at that frame.
fn assign_neighbors(meta: &RecordingMeta, tracks: &mut [Track]) {
    let mut frames: BTreeMap<(i64, i64), Vec<Present>> = BTreeMap::new();
    for (ti, t) in tracks.iter().enumerate() {
        let sign = ego_direction_sign(t.direction);
        for (si, s) in t.states.iter().enumerate() {
            frames.entry((s.frame, s.lane_id)).or_default().push(Present {
                track: ti,
                state: si,
                track_id: t.track_id,
                x: sign * s.x,
            });
        }
    }
    for lane in frames.values_mut() {
        lane.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.track_id.cmp(&b.track_id)));
    }
    let lanes = meta.upper_lane_ids.len();
    let empty: Vec<Present> = Vec::new();
    let mut updates: Vec<(usize, usize, [Option<i64>; 8])> = Vec::new();
    for (&(frame, lane_id), present) in &frames {
        let (direction, k, ids) = match meta.upper_lane_ids.iter().position(|&id| id == lane_id) {
            Some(k) => (Direction::Upper, k, &meta.upper_lane_ids),
            None => (
                Direction::Lower,
                meta.lower_lane_ids.iter().position(|&id| id == lane_id).expect("generated lane"),
                &meta.lower_lane_ids,
            ),
        };
        let lane_at = |side: Option<usize>| side.and_then(|s| frames.get(&(frame, ids[s]))).unwrap_or(&empty);
        let left = lane_at(left_of(direction, k, lanes));
        let right = lane_at(right_of(direction, k, lanes));
        for (i, p) in present.iter().enumerate() {
            let mut nb = [None; 8];
            nb[NeighborRole::Preceding.index()] = present.get(i + 1).map(|q| q.track_id);
            nb[NeighborRole::Following.index()] = i.checked_sub(1).map(|j| present[j].track_id);
            let [lp, la, lf] = side_neighbors(left, p.x, p.track);
            let [rp, ra, rf] = side_neighbors(right, p.x, p.track);
            nb[NeighborRole::LeftPreceding.index()] = lp;
            nb[NeighborRole::LeftAlongside.index()] = la;
            nb[NeighborRole::LeftFollowing.index()] = lf;
            nb[NeighborRole::RightPreceding.index()] = rp;
            nb[NeighborRole::RightAlongside.index()] = ra;
            nb[NeighborRole::RightFollowing.index()] = rf;
            updates.push((p.track, p.state, nb));
        }
    }
    for (t, s, nb) in updates {
        tracks[t].states[s].neighbors = nb;
    }
}

/// Builds the corpus in memory, one recording per `tracks_per_recording`
/// tracks, with track ids starting at 1 in each recording.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let n_rec = spec.n_tracks.div_ceil(spec.tracks_per_recording);
    let built: Vec<(Recording, Vec<TrackTruth>)> = (0..n_rec)
        .into_par_iter()
        .map(|r| {
            let recording_id = r as i64 + 1;
            let meta = spec.meta(recording_id)?;
            let count = spec.tracks_per_recording.min(spec.n_tracks - r * spec.tracks_per_recording);
            let (mut tracks, truth): (Vec<Track>, Vec<TrackTruth>) = (1..=count as i64)
                .map(|id| synth_track(spec, &meta, recording_id, id))
                .unzip();
            assign_neighbors(&meta, &mut tracks);
            Ok((Recording::new(meta, tracks)?, truth))
        })
        .collect::<Result<_>>()?;
    let mut recordings = Vec::with_capacity(n_rec);
    let mut truth = Vec::with_capacity(spec.n_tracks);
    for (rec, t) in built {
        recordings.push(rec);
        truth.extend(t);
    }
    Ok(SyntheticCorpus { recordings, truth })
}

/// Writes the corpus as `NN_recordingMeta.csv`, `NN_tracksMeta.csv` and
/// `NN_tracks.csv` files in `dir`.
pub fn generate_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<Vec<RecordingFiles>> {
    let corpus = synthesize(spec)?;
    corpus
        .recordings
        .iter()
        .map(|rec| write_recording(rec, dir, &format!("{:02}", rec.meta.recording_id)))
        .collect()
}

pub const TOY_NOISE: f64 = 0.05;

/// `3 * n_per_class` matrices of `n` rows (LK, then LLC, then RLC). The ego
/// lateral velocity ramps from 0 to +1 m/s for LLC and to −1 m/s for RLC and
/// stays at 0 for LK; everything carries Gaussian noise of `TOY_NOISE`.
pub fn generate_separable_toy(n_per_class: usize, n: usize, seed: u64) -> Vec<FeatureMatrix> {
    generate_toy_with_noise(n_per_class, n, TOY_NOISE, seed)
}

/// [`generate_separable_toy`] with an explicit noise scale. Large scales
/// break separability.
pub fn generate_toy_with_noise(n_per_class: usize, n: usize, noise: f64, seed: u64) -> Vec<FeatureMatrix> {
    assert!(n >= 2, "toy windows need at least two rows");
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let mut out = Vec::with_capacity(3 * n_per_class);
    for label in [Label::Lk, Label::Llc, Label::Rlc] {
        let slope = match label {
            Label::Lk => 0.0,
            Label::Llc => 1.0,
            Label::Rlc => -1.0,
        };
        for i in 0..n_per_class {
            let mut rng = rng::stream(seed, &[tag::SYNTH_TRACK, label.index() as u64, i as u64]);
            let mut values: Vec<f64> = (0..n * FEATURE_COUNT).map(|_| jitter.sample(&mut rng)).collect();
            for j in 0..n {
                values[j * FEATURE_COUNT + 2] += slope * (j + 1) as f64 / n as f64;
            }
            let t = (label != Label::Lk).then_some(1.0);
            out.push(FeatureMatrix::new(n, values, label, t).expect("toy shape"));
        }
    }
    out
}
