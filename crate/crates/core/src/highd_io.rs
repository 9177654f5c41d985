//! Reading and writing recordings in the public highD CSV layout.
//!
//! A recording is three comma-separated files sharing a numeric prefix:
//! `XX_recordingMeta.csv`, `XX_tracksMeta.csv` and `XX_tracks.csv`. Only the
//! columns needed downstream are read; any other column is ignored.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The eight surrounding-vehicle roles around a target vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NeighborRole {
    Preceding,
    Following,
    LeftPreceding,
    LeftAlongside,
    LeftFollowing,
    RightPreceding,
    RightAlongside,
    RightFollowing,
}

impl NeighborRole {
    /// All roles, in the order their feature blocks appear in a feature row.
    pub const ALL: [NeighborRole; 8] = [
        NeighborRole::Preceding,
        NeighborRole::Following,
        NeighborRole::LeftPreceding,
        NeighborRole::LeftAlongside,
        NeighborRole::LeftFollowing,
        NeighborRole::RightPreceding,
        NeighborRole::RightAlongside,
        NeighborRole::RightFollowing,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn short_name(self) -> &'static str {
        match self {
            NeighborRole::Preceding => "p",
            NeighborRole::Following => "f",
            NeighborRole::LeftPreceding => "lp",
            NeighborRole::LeftAlongside => "la",
            NeighborRole::LeftFollowing => "lf",
            NeighborRole::RightPreceding => "rp",
            NeighborRole::RightAlongside => "ra",
            NeighborRole::RightFollowing => "rf",
        }
    }

    /// Column name in `XX_tracks.csv`.
    pub fn column(self) -> &'static str {
        match self {
            NeighborRole::Preceding => "precedingId",
            NeighborRole::Following => "followingId",
            NeighborRole::LeftPreceding => "leftPrecedingId",
            NeighborRole::LeftAlongside => "leftAlongsideId",
            NeighborRole::LeftFollowing => "leftFollowingId",
            NeighborRole::RightPreceding => "rightPrecedingId",
            NeighborRole::RightAlongside => "rightAlongsideId",
            NeighborRole::RightFollowing => "rightFollowingId",
        }
    }

    pub fn is_preceding(self) -> bool {
        matches!(
            self,
            NeighborRole::Preceding | NeighborRole::LeftPreceding | NeighborRole::RightPreceding
        )
    }

    pub fn is_following(self) -> bool {
        matches!(
            self,
            NeighborRole::Following | NeighborRole::LeftFollowing | NeighborRole::RightFollowing
        )
    }
}

impl fmt::Display for NeighborRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// highD `drivingDirection`: 1 drives towards negative x (upper lanes), 2
/// towards positive x (lower lanes).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Upper = 1,
    Lower = 2,
}

impl Direction {
    pub fn code(self) -> i64 {
        self as i64
    }
}

impl TryFrom<i64> for Direction {
    type Error = Error;

    fn try_from(code: i64) -> Result<Self> {
        match code {
            1 => Ok(Direction::Upper),
            2 => Ok(Direction::Lower),
            other => Err(Error::BadDirection(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingMeta {
    pub recording_id: i64,
    pub frame_rate_hz: f64,
    /// Lateral positions (image y, metres) of the upper carriageway's lane
    /// markings, top to bottom.
    pub upper_lane_markings: Vec<f64>,
    pub lower_lane_markings: Vec<f64>,
    pub upper_lane_ids: Vec<i64>,
    pub lower_lane_ids: Vec<i64>,
}

impl RecordingMeta {
    /// Builds the metadata and derives lane ids the way highD numbers them:
    /// every gap between consecutive markings (and the outer areas) gets an id
    /// counting from 1 at the top, so with `u` upper and `l` lower markings the
    /// upper lanes are `2..=u` and the lower lanes `u+2..=u+l`.
    pub fn new(
        recording_id: i64,
        frame_rate_hz: f64,
        upper_lane_markings: Vec<f64>,
        lower_lane_markings: Vec<f64>,
    ) -> Result<Self> {
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(Error::InvalidRecording(format!(
                "frame rate must be positive, got {frame_rate_hz}"
            )));
        }
        if upper_lane_markings.len() < 2 || lower_lane_markings.len() < 2 {
            return Err(Error::InvalidRecording(
                "each carriageway needs at least two lane markings".into(),
            ));
        }
        let u = upper_lane_markings.len() as i64;
        let l = lower_lane_markings.len() as i64;
        Ok(RecordingMeta {
            recording_id,
            frame_rate_hz,
            upper_lane_ids: (2..=u).collect(),
            lower_lane_ids: (u + 2..=u + l).collect(),
            upper_lane_markings,
            lower_lane_markings,
        })
    }

    pub fn has_lane(&self, lane_id: i64) -> bool {
        self.upper_lane_ids.contains(&lane_id) || self.lower_lane_ids.contains(&lane_id)
    }

    /// Lateral (top, bottom) bounds of a lane in image coordinates.
    pub fn lane_bounds(&self, lane_id: i64) -> Option<(f64, f64)> {
        if let Some(i) = self.upper_lane_ids.iter().position(|&id| id == lane_id) {
            return Some((self.upper_lane_markings[i], self.upper_lane_markings[i + 1]));
        }
        self.lower_lane_ids
            .iter()
            .position(|&id| id == lane_id)
            .map(|i| (self.lower_lane_markings[i], self.lower_lane_markings[i + 1]))
    }
}

pub fn frames_per_second(meta: &RecordingMeta) -> f64 {
    meta.frame_rate_hz
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub x_velocity: f64,
    pub y_velocity: f64,
    pub lane_id: i64,
    /// Indexed by [`NeighborRole::index`]; `None` where highD writes 0.
    pub neighbors: [Option<i64>; 8],
}

impl TrackState {
    pub fn neighbor(&self, role: NeighborRole) -> Option<i64> {
        self.neighbors[role.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub track_id: i64,
    pub direction: Direction,
    pub states: Vec<TrackState>,
}

impl Track {
    pub fn first_frame(&self) -> i64 {
        self.states[0].frame
    }

    /// One past the last frame.
    pub fn end_frame(&self) -> i64 {
        self.first_frame() + self.states.len() as i64
    }

    pub fn state_at(&self, frame: i64) -> Option<&TrackState> {
        let offset = frame.checked_sub(self.first_frame())?;
        if offset < 0 {
            return None;
        }
        self.states.get(offset as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub meta: RecordingMeta,
    /// Sorted by track id.
    pub tracks: Vec<Track>,
    index: HashMap<i64, usize>,
}

impl Recording {
    /// Validates the tracks and builds the id index.
    pub fn new(meta: RecordingMeta, mut tracks: Vec<Track>) -> Result<Self> {
        tracks.sort_by_key(|t| t.track_id);
        let mut index = HashMap::with_capacity(tracks.len());
        for (i, track) in tracks.iter().enumerate() {
            if track.states.is_empty() {
                return Err(Error::InvalidRecording(format!(
                    "track {} has no states",
                    track.track_id
                )));
            }
            if track.states.windows(2).any(|w| w[1].frame != w[0].frame + 1) || track.first_frame() < 0 {
                return Err(Error::NonContiguousFrames(track.track_id));
            }
            if let Some(s) = track.states.iter().find(|s| !meta.has_lane(s.lane_id)) {
                return Err(Error::UnknownLaneId {
                    track_id: track.track_id,
                    frame: s.frame,
                    lane_id: s.lane_id,
                });
            }
            if index.insert(track.track_id, i).is_some() {
                return Err(Error::InvalidRecording(format!(
                    "duplicate track id {}",
                    track.track_id
                )));
            }
        }
        Ok(Recording {
            meta,
            tracks,
            index,
        })
    }

    pub fn track(&self, track_id: i64) -> Option<&Track> {
        self.index.get(&track_id).map(|&i| &self.tracks[i])
    }

    /// Neighbor references that do not resolve to a track of this recording,
    /// as `(track_id, frame, neighbor_id)`.
    pub fn dangling_neighbors(&self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for track in &self.tracks {
            for s in &track.states {
                for id in s.neighbors.iter().flatten() {
                    if self.track(*id).is_none() {
                        out.push((track.track_id, s.frame, *id));
                    }
                }
            }
        }
        out
    }
}

/// File paths of one recording inside a directory.
#[derive(Clone, Debug)]
pub struct RecordingFiles {
    pub meta: PathBuf,
    pub tracks_meta: PathBuf,
    pub tracks: PathBuf,
}

impl RecordingFiles {
    pub fn in_dir(dir: &Path, prefix: &str) -> Self {
        RecordingFiles {
            meta: dir.join(format!("{prefix}_recordingMeta.csv")),
            tracks_meta: dir.join(format!("{prefix}_tracksMeta.csv")),
            tracks: dir.join(format!("{prefix}_tracks.csv")),
        }
    }
}

struct Table {
    path: PathBuf,
    columns: HashMap<String, usize>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(Error::csv(path))?;
        let columns = reader
            .headers()
            .map_err(Error::csv(path))?
            .iter()
            .enumerate()
            .map(|(i, name)| (name.trim_start_matches('\u{feff}').to_string(), i))
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(Error::csv(path))?;
            let line = record.position().map_or(0, |p| p.line());
            rows.push((line, record));
        }
        Ok(Table {
            path: path.to_path_buf(),
            columns,
            rows,
        })
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.columns.get(name).copied().ok_or_else(|| Error::MissingColumn {
            path: self.path.clone(),
            name: name.to_string(),
        })
    }

    fn parse<T: std::str::FromStr>(&self, row: usize, col: usize, name: &str) -> Result<T> {
        let (line, record) = &self.rows[row];
        let raw = record.get(col).unwrap_or("");
        raw.parse().map_err(|_| Error::BadValue {
            path: self.path.clone(),
            line: *line,
            column: name.to_string(),
            value: raw.to_string(),
        })
    }

    fn parse_list(&self, row: usize, col: usize, name: &str) -> Result<Vec<f64>> {
        let (line, record) = &self.rows[row];
        let raw = record.get(col).unwrap_or("");
        raw.split(';')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim().parse().map_err(|_| Error::BadValue {
                    path: self.path.clone(),
                    line: *line,
                    column: name.to_string(),
                    value: raw.to_string(),
                })
            })
            .collect()
    }
}

/// highD ids are written as integers but some exports use `12.0`.
fn parse_id(table: &Table, row: usize, col: usize, name: &str) -> Result<i64> {
    match table.parse::<i64>(row, col, name) {
        Ok(v) => Ok(v),
        Err(e) => {
            let v: f64 = table.parse(row, col, name).map_err(|_| e)?;
            if v.fract() == 0.0 && v.is_finite() {
                Ok(v as i64)
            } else {
                table.parse::<i64>(row, col, name)
            }
        }
    }
}

pub fn parse_recording_meta(path: &Path) -> Result<RecordingMeta> {
    let table = Table::read(path)?;
    let id = table.column("id")?;
    let rate = table.column("frameRate")?;
    let upper = table.column("upperLaneMarkings")?;
    let lower = table.column("lowerLaneMarkings")?;
    if table.rows.is_empty() {
        return Err(Error::InvalidRecording(format!(
            "{}: no metadata row",
            path.display()
        )));
    }
    RecordingMeta::new(
        parse_id(&table, 0, id, "id")?,
        table.parse(0, rate, "frameRate")?,
        table.parse_list(0, upper, "upperLaneMarkings")?,
        table.parse_list(0, lower, "lowerLaneMarkings")?,
    )
}

/// Parses one recording from its three files.
pub fn parse_recording(meta_file: &Path, tracks_meta_file: &Path, tracks_file: &Path) -> Result<Recording> {
    let meta = parse_recording_meta(meta_file)?;

    let tm = Table::read(tracks_meta_file)?;
    let tm_id = tm.column("id")?;
    let tm_dir = tm.column("drivingDirection")?;
    let mut directions = HashMap::with_capacity(tm.rows.len());
    for row in 0..tm.rows.len() {
        let id = parse_id(&tm, row, tm_id, "id")?;
        let direction = Direction::try_from(parse_id(&tm, row, tm_dir, "drivingDirection")?)?;
        directions.insert(id, direction);
    }

    let t = Table::read(tracks_file)?;
    let c_frame = t.column("frame")?;
    let c_id = t.column("id")?;
    let c_x = t.column("x")?;
    let c_y = t.column("y")?;
    let c_vx = t.column("xVelocity")?;
    let c_vy = t.column("yVelocity")?;
    let c_lane = t.column("laneId")?;
    let c_roles = NeighborRole::ALL
        .iter()
        .map(|r| t.column(r.column()))
        .collect::<Result<Vec<_>>>()?;

    let mut grouped: BTreeMap<i64, Vec<TrackState>> = BTreeMap::new();
    for row in 0..t.rows.len() {
        let mut neighbors = [None; 8];
        for (slot, (&col, role)) in neighbors.iter_mut().zip(c_roles.iter().zip(NeighborRole::ALL)) {
            let id = parse_id(&t, row, col, role.column())?;
            *slot = (id != 0).then_some(id);
        }
        let state = TrackState {
            frame: parse_id(&t, row, c_frame, "frame")?,
            x: t.parse(row, c_x, "x")?,
            y: t.parse(row, c_y, "y")?,
            x_velocity: t.parse(row, c_vx, "xVelocity")?,
            y_velocity: t.parse(row, c_vy, "yVelocity")?,
            lane_id: parse_id(&t, row, c_lane, "laneId")?,
            neighbors,
        };
        grouped
            .entry(parse_id(&t, row, c_id, "id")?)
            .or_default()
            .push(state);
    }

    let mut tracks = Vec::with_capacity(grouped.len());
    for (track_id, mut states) in grouped {
        states.sort_by_key(|s| s.frame);
        let direction = *directions
            .get(&track_id)
            .ok_or(Error::MissingTrackMeta(track_id))?;
        tracks.push(Track {
            track_id,
            direction,
            states,
        });
    }
    Recording::new(meta, tracks)
}

/// Prefixes (`01`, `02`, ...) of every complete recording in `dir`, sorted.
pub fn recording_prefixes(dir: &Path) -> Result<Vec<String>> {
    let mut prefixes = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(prefix) = name.strip_suffix("_recordingMeta.csv") {
            let files = RecordingFiles::in_dir(dir, prefix);
            if files.tracks_meta.exists() && files.tracks.exists() {
                prefixes.push(prefix.to_string());
            }
        }
    }
    prefixes.sort();
    Ok(prefixes)
}

/// Parses every recording in `dir` (in parallel), ordered by prefix.
pub fn read_recording_dir(dir: &Path) -> Result<Vec<Recording>> {
    let prefixes = recording_prefixes(dir)?;
    if prefixes.is_empty() {
        return Err(Error::InvalidRecording(format!(
            "{}: no *_recordingMeta.csv found",
            dir.display()
        )));
    }
    prefixes
        .par_iter()
        .map(|p| {
            let files = RecordingFiles::in_dir(dir, p);
            parse_recording(&files.meta, &files.tracks_meta, &files.tracks)
        })
        .collect()
}

fn join_markings(m: &[f64]) -> String {
    m.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Writes a recording as `{prefix}_recordingMeta.csv` etc. Floats use the
/// shortest representation that parses back to the same value, so
/// write-then-parse is lossless.
pub fn write_recording(rec: &Recording, dir: &Path, prefix: &str) -> Result<RecordingFiles> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let files = RecordingFiles::in_dir(dir, prefix);

    let mut w = csv::Writer::from_path(&files.meta).map_err(Error::csv(&files.meta))?;
    w.write_record(["id", "frameRate", "numVehicles", "upperLaneMarkings", "lowerLaneMarkings"])
        .and_then(|_| {
            w.write_record([
                rec.meta.recording_id.to_string(),
                rec.meta.frame_rate_hz.to_string(),
                rec.tracks.len().to_string(),
                join_markings(&rec.meta.upper_lane_markings),
                join_markings(&rec.meta.lower_lane_markings),
            ])
        })
        .and_then(|_| w.flush().map_err(csv::Error::from))
        .map_err(Error::csv(&files.meta))?;

    let mut w = csv::Writer::from_path(&files.tracks_meta).map_err(Error::csv(&files.tracks_meta))?;
    w.write_record([
        "id",
        "initialFrame",
        "finalFrame",
        "numFrames",
        "drivingDirection",
        "numLaneChanges",
    ])
    .map_err(Error::csv(&files.tracks_meta))?;
    for t in &rec.tracks {
        let lane_changes = t.states.windows(2).filter(|w| w[0].lane_id != w[1].lane_id).count();
        w.write_record([
            t.track_id.to_string(),
            t.first_frame().to_string(),
            (t.end_frame() - 1).to_string(),
            t.states.len().to_string(),
            t.direction.code().to_string(),
            lane_changes.to_string(),
        ])
        .map_err(Error::csv(&files.tracks_meta))?;
    }
    w.flush().map_err(Error::io(&files.tracks_meta))?;

    let mut w = csv::Writer::from_path(&files.tracks).map_err(Error::csv(&files.tracks))?;
    let mut header = vec!["frame", "id", "x", "y", "xVelocity", "yVelocity"];
    header.extend(NeighborRole::ALL.iter().map(|r| r.column()));
    header.push("laneId");
    w.write_record(&header).map_err(Error::csv(&files.tracks))?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for t in &rec.tracks {
        for s in &t.states {
            row.clear();
            row.push(s.frame.to_string());
            row.push(t.track_id.to_string());
            row.push(s.x.to_string());
            row.push(s.y.to_string());
            row.push(s.x_velocity.to_string());
            row.push(s.y_velocity.to_string());
            row.extend(s.neighbors.iter().map(|n| n.unwrap_or(0).to_string()));
            row.push(s.lane_id.to_string());
            w.write_record(&row).map_err(Error::csv(&files.tracks))?;
        }
    }
    w.flush().map_err(Error::io(&files.tracks))?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const META: &str = "id,frameRate,locationId,upperLaneMarkings,lowerLaneMarkings\n\
                        1,25,2,8.51;12.59;16.43,21.0;24.96;28.88\n";
    const TRACKS_META: &str = "id,width,height,drivingDirection\n1,4.5,1.9,2\n2,4.2,1.8,2\n";

    fn tracks_csv(rows: &[(i64, i64, i64, i64)]) -> String {
        let mut s = String::from(
            "frame,id,x,y,width,height,xVelocity,yVelocity,precedingId,followingId,leftPrecedingId,\
             leftAlongsideId,leftFollowingId,rightPrecedingId,rightAlongsideId,rightFollowingId,laneId\n",
        );
        for &(frame, id, preceding, lane) in rows {
            s.push_str(&format!(
                "{frame},{id},{},{},4.5,1.9,30.0,0.1,{preceding},0,0,0,0,0,0,0,{lane}\n",
                10.0 + frame as f64,
                22.5
            ));
        }
        s
    }

    fn fixture(rows: &[(i64, i64, i64, i64)]) -> (tempfile::TempDir, RecordingFiles) {
        let dir = tempfile::tempdir().unwrap();
        let files = RecordingFiles {
            meta: write(dir.path(), "01_recordingMeta.csv", META),
            tracks_meta: write(dir.path(), "01_tracksMeta.csv", TRACKS_META),
            tracks: write(dir.path(), "01_tracks.csv", &tracks_csv(rows)),
        };
        (dir, files)
    }

    #[test]
    fn lane_ids_follow_highd_numbering() {
        let m = RecordingMeta::new(1, 25.0, vec![1.0, 2.0, 3.0], vec![5.0, 6.0, 7.0]).unwrap();
        assert_eq!(m.upper_lane_ids, vec![2, 3]);
        assert_eq!(m.lower_lane_ids, vec![5, 6]);
        let m = RecordingMeta::new(1, 25.0, vec![0.0; 4], vec![0.0; 4]).unwrap();
        assert_eq!(m.upper_lane_ids, vec![2, 3, 4]);
        assert_eq!(m.lower_lane_ids, vec![6, 7, 8]);
        assert_eq!(frames_per_second(&m), 25.0);
    }

    #[test]
    fn frames_per_second_reports_meta_rate() {
        let m = RecordingMeta::new(3, 10.0, vec![1.0, 2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(frames_per_second(&m), 10.0);
    }

    #[test]
    fn parses_two_tracks_of_ten_frames() {
        let mut rows = Vec::new();
        for id in 1..=2 {
            for frame in 0..10 {
                rows.push((frame, id, 0, 5));
            }
        }
        let (_dir, f) = fixture(&rows);
        let rec = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap();
        assert_eq!(rec.meta.frame_rate_hz, 25.0);
        assert_eq!(rec.tracks.len(), 2);
        assert!(rec.tracks.iter().all(|t| t.states.len() == 10));
        assert_eq!(rec.track(2).unwrap().direction, Direction::Lower);
    }

    #[test]
    fn zero_neighbor_id_is_absent() {
        let (_dir, f) = fixture(&[(0, 1, 2, 5), (1, 1, 0, 5), (0, 2, 0, 5), (1, 2, 0, 5)]);
        let rec = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap();
        let t = rec.track(1).unwrap();
        assert_eq!(t.states[0].neighbor(NeighborRole::Preceding), Some(2));
        assert_eq!(t.states[1].neighbor(NeighborRole::Preceding), None);
        assert_eq!(t.states[1].neighbor(NeighborRole::RightFollowing), None);
        assert!(rec.dangling_neighbors().is_empty());
    }

    #[test]
    fn frame_gap_is_rejected() {
        let rows: Vec<_> = [0, 1, 2, 3, 4, 5, 7, 8].iter().map(|&fr| (fr, 1, 0, 5)).collect();
        let (_dir, f) = fixture(&rows);
        let err = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap_err();
        assert!(matches!(err, Error::NonContiguousFrames(1)), "{err}");
    }

    #[test]
    fn unknown_lane_is_rejected() {
        let (_dir, f) = fixture(&[(0, 1, 0, 5), (1, 1, 0, 9)]);
        let err = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap_err();
        assert!(
            matches!(err, Error::UnknownLaneId { track_id: 1, frame: 1, lane_id: 9 }),
            "{err}"
        );
    }

    #[test]
    fn missing_column_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let meta = write(dir.path(), "m.csv", META);
        let tm = write(dir.path(), "tm.csv", TRACKS_META);
        let tracks = write(dir.path(), "t.csv", "frame,id,x,y\n0,1,1,1\n");
        match parse_recording(&meta, &tm, &tracks).unwrap_err() {
            Error::MissingColumn { name, .. } => assert_eq!(name, "xVelocity"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unsorted_rows_are_grouped_and_ordered() {
        let (_dir, f) = fixture(&[(2, 1, 0, 5), (0, 1, 0, 5), (1, 1, 0, 5), (0, 2, 0, 6)]);
        let rec = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap();
        let frames: Vec<i64> = rec.track(1).unwrap().states.iter().map(|s| s.frame).collect();
        assert_eq!(frames, vec![0, 1, 2]);
    }

    #[test]
    fn write_then_parse_is_identity() {
        let (_dir, f) = fixture(&[(3, 1, 2, 5), (4, 1, 2, 6), (3, 2, 0, 5), (4, 2, 0, 5)]);
        let rec = parse_recording(&f.meta, &f.tracks_meta, &f.tracks).unwrap();
        let out = tempfile::tempdir().unwrap();
        let files = write_recording(&rec, out.path(), "07").unwrap();
        let again = parse_recording(&files.meta, &files.tracks_meta, &files.tracks).unwrap();
        assert_eq!(rec, again);
        assert_eq!(recording_prefixes(out.path()).unwrap(), vec!["07".to_string()]);
    }
}
