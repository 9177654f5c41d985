//! Direction normalisation and the 36-column feature matrix.
//!
//! Both carriageways are mapped onto one canonical frame in which the target
//! drives towards +x and "left" is +y. A feature row holds the ego block
//! `(y, x, v_y, v_x)`, then the preceding and following blocks as
//! `(Δy, Δx, v_y, v_x)`, then the six side blocks `lp, la, lf, rp, ra, rf` as
//! `(Δx, Δy, v_y, v_x)`. The p/f blocks really do list Δy first.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::highd_io::{Direction, NeighborRole, Recording, TrackState};
use crate::segmentation::{Label, Segment};

/// Columns per feature row.
pub const FEATURE_COUNT: usize = 36;

/// Distance used in place of an absent neighbor.
pub const ABSENT_DISTANCE_M: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoFeatures {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborFeatures {
    pub dx: f64,
    pub dy: f64,
    pub vy: f64,
    pub vx: f64,
}

/// `(x_t, y_t, v_x, v_y)` of the target in the canonical frame.
pub fn transform_ego(state: &TrackState, direction: Direction) -> (f64, f64, f64, f64) {
    let e = ego_features(state, direction);
    (e.x, e.y, e.vx, e.vy)
}

pub fn ego_features(state: &TrackState, direction: Direction) -> EgoFeatures {
    match direction {
        Direction::Upper => EgoFeatures {
            x: -state.x,
            y: state.y,
            vx: -state.x_velocity,
            vy: state.y_velocity,
        },
        Direction::Lower => EgoFeatures {
            x: state.x,
            y: -state.y,
            vx: state.x_velocity,
            vy: -state.y_velocity,
        },
    }
}

/// Relative position and absolute velocity of a neighbor in the canonical
/// frame. An absent neighbor is placed 100 m away (ahead for preceding roles,
/// behind for following roles, beside for alongside roles) moving exactly like
/// the target.
pub fn neighbor_relatives(
    target: &TrackState,
    neighbor: Option<&TrackState>,
    direction: Direction,
    role: NeighborRole,
) -> NeighborFeatures {
    let Some(nb) = neighbor else {
        return absent_neighbor(target, direction, role);
    };
    match direction {
        Direction::Upper => NeighborFeatures {
            dx: target.x - nb.x,
            dy: nb.y - target.y,
            vy: nb.y_velocity,
            vx: -nb.x_velocity,
        },
        Direction::Lower => NeighborFeatures {
            dx: nb.x - target.x,
            dy: target.y - nb.y,
            vy: -nb.y_velocity,
            vx: nb.x_velocity,
        },
    }
}

fn absent_neighbor(target: &TrackState, direction: Direction, role: NeighborRole) -> NeighborFeatures {
    let ego = ego_features(target, direction);
    let (dx, dy) = match role {
        NeighborRole::LeftAlongside => (0.0, ABSENT_DISTANCE_M),
        NeighborRole::RightAlongside => (0.0, -ABSENT_DISTANCE_M),
        r if r.is_preceding() => (ABSENT_DISTANCE_M, 0.0),
        _ => (-ABSENT_DISTANCE_M, 0.0),
    };
    NeighborFeatures {
        dx,
        dy,
        vy: ego.vy,
        vx: ego.vx,
    }
}

/// Column names in row order.
pub fn column_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut names: Vec<String> = ["y_t", "x_t", "vy_t", "vx_t"].iter().map(|s| s.to_string()).collect();
        for role in NeighborRole::ALL {
            let r = role.short_name();
            let block = if matches!(role, NeighborRole::Preceding | NeighborRole::Following) {
                [format!("dy_{r}"), format!("dx_{r}"), format!("vy_{r}"), format!("vx_{r}")]
            } else {
                [format!("dx_{r}"), format!("dy_{r}"), format!("vy_{r}"), format!("vx_{r}")]
            };
            names.extend(block);
        }
        names
    })
}

/// Writes one feature row for `state` into `row`.
pub fn feature_row(
    state: &TrackState,
    direction: Direction,
    neighbor_state: impl Fn(NeighborRole) -> Result<Option<TrackState>>,
    row: &mut [f64],
) -> Result<()> {
    let ego = ego_features(state, direction);
    row[..4].copy_from_slice(&[ego.y, ego.x, ego.vy, ego.vx]);
    for (k, role) in NeighborRole::ALL.into_iter().enumerate() {
        let nb = neighbor_state(role)?;
        let f = neighbor_relatives(state, nb.as_ref(), direction, role);
        let block = if matches!(role, NeighborRole::Preceding | NeighborRole::Following) {
            [f.dy, f.dx, f.vy, f.vx]
        } else {
            [f.dx, f.dy, f.vy, f.vx]
        };
        row[4 + 4 * k..8 + 4 * k].copy_from_slice(&block);
    }
    Ok(())
}

/// An `n × 36` observation window with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: usize,
    /// Row-major, `rows * FEATURE_COUNT` values.
    pub values: Vec<f64>,
    pub label: Label,
    pub prediction_time_s: Option<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, values: Vec<f64>, label: Label, prediction_time_s: Option<f64>) -> Result<Self> {
        if values.len() != rows * FEATURE_COUNT {
            return Err(Error::shape(
                "feature matrix",
                format!("{} values for {rows} rows of {FEATURE_COUNT}", values.len()),
            ));
        }
        Ok(FeatureMatrix {
            rows,
            values,
            label,
            prediction_time_s,
        })
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT]
    }

    pub fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |j| self.values[j * FEATURE_COUNT + k])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn assemble_feature_matrix(segment: &Segment, recording: &Recording) -> Result<FeatureMatrix> {
    let track = recording
        .track(segment.track_id)
        .ok_or(Error::MissingTrack(segment.track_id))?;
    let n = segment.len();
    let mut values = vec![0.0; n * FEATURE_COUNT];
    for (j, frame) in (segment.start_frame..segment.end_frame).enumerate() {
        let state = track.state_at(frame).ok_or(Error::MissingFrame {
            track_id: track.track_id,
            frame,
        })?;
        let lookup = |role: NeighborRole| -> Result<Option<TrackState>> {
            let Some(id) = state.neighbor(role) else {
                return Ok(None);
            };
            let nb_track = recording.track(id).ok_or(Error::MissingTrack(id))?;
            let nb = nb_track
                .state_at(frame)
                .ok_or(Error::MissingFrame { track_id: id, frame })?;
            Ok(Some(nb.clone()))
        };
        feature_row(
            state,
            track.direction,
            lookup,
            &mut values[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT],
        )?;
    }
    FeatureMatrix::new(n, values, segment.label, segment.prediction_time_s)
}

/// Per-column z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; 1 for constant columns.
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on every row of every matrix (train split only).
    pub fn fit(train: &[FeatureMatrix]) -> Result<Self> {
        let rows: usize = train.iter().map(|m| m.rows).sum();
        if rows == 0 {
            return Err(Error::EmptyInput);
        }
        let mut mean = vec![0.0; FEATURE_COUNT];
        for m in train {
            for (k, v) in m.values.iter().enumerate() {
                mean[k % FEATURE_COUNT] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; FEATURE_COUNT];
        for m in train {
            for (k, v) in m.values.iter().enumerate() {
                let d = v - mean[k % FEATURE_COUNT];
                var[k % FEATURE_COUNT] += d * d;
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / rows as f64).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, fm: &FeatureMatrix) -> FeatureMatrix {
        let mut out = fm.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            let c = k % FEATURE_COUNT;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }

    pub fn inverse(&self, fm: &FeatureMatrix) -> FeatureMatrix {
        let mut out = fm.clone();
        for (k, v) in out.values.iter_mut().enumerate() {
            let c = k % FEATURE_COUNT;
            *v = *v * self.std[c] + self.mean[c];
        }
        out
    }
}
