//! Tracked-object log ingestion.
//!
//! Observations of the historical frames `i-1 ..= i-n` are warped into the
//! ego frame of the current frame `i` and grouped per track. Nothing is
//! smoothed or interpolated; occluded observations are kept and flagged.

use std::collections::BTreeMap;
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::geometry::{compose_relative, PointBEV, PoseRecord, RigidPose};

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("i/o error reading {log} log: {source}")]
    Io {
        log: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("{log} log line {line}: {message}")]
    Malformed {
        log: &'static str,
        line: usize,
        message: String,
    },
    #[error("no pose for frame {0}")]
    MissingPose(i64),
    #[error("track `{track_id}` observed twice in frame {frame}")]
    DuplicateObservation { track_id: String, frame: i64 },
    #[error("window must be at least 1, got {0}")]
    InvalidWindow(i64),
    #[error("invalid range: {0}")]
    InvalidRange(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Vehicle,
    Pedestrian,
    Cyclist,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Vehicle,
        Category::Pedestrian,
        Category::Cyclist,
        Category::Other,
    ];

    /// Row of the category embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Vehicle => "vehicle",
            Category::Pedestrian => "pedestrian",
            Category::Cyclist => "cyclist",
            Category::Other => "other",
        }
    }

    /// Maps a log category string; `None` for anything outside the closed set.
    pub fn parse(s: &str) -> Option<Category> {
        match s {
            "vehicle" => Some(Category::Vehicle),
            "pedestrian" => Some(Category::Pedestrian),
            "cyclist" => Some(Category::Cyclist),
            "other" => Some(Category::Other),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Axis-aligned closed rectangle `[x_min, x_max] × [y_min, y_max]`, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Default for RangeSpec {
    fn default() -> Self {
        Self {
            x_min: -50.0,
            x_max: 50.0,
            y_min: -25.0,
            y_max: 25.0,
        }
    }
}

impl RangeSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self, FlowError> {
        let r = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(FlowError::InvalidRange(format!(
                "[{}, {}] x [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: PointBEV) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Distance from the ego origin to the farthest corner.
    pub fn corner_distance(&self) -> f64 {
        let dx = self.x_min.abs().max(self.x_max.abs());
        let dy = self.y_min.abs().max(self.y_max.abs());
        dx.hypot(dy)
    }

    /// Maps a point to `[-1, 1]²` (exactly, for points inside the range).
    pub fn normalize(&self, p: PointBEV) -> (f64, f64) {
        (
            2.0 * (p.x - self.x_min) / self.width() - 1.0,
            2.0 * (p.y - self.y_min) / self.height() - 1.0,
        )
    }
}

impl FromStr for RangeSpec {
    type Err = FlowError;

    /// Parses `x_min,x_max,y_min,y_max`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FlowError::InvalidRange(format!("`{s}`: {e}")))?;
        match parts[..] {
            [x0, x1, y0, y1] => RangeSpec::new(x0, x1, y0, y1),
            _ => Err(FlowError::InvalidRange(format!(
                "`{s}`: expected four comma-separated numbers"
            ))),
        }
    }
}

/// One line of a trajectory log. Coordinates are in the ego frame of `frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub frame: i64,
    pub id: String,
    pub cat: String,
    pub x: f64,
    pub y: f64,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectObservation {
    pub frame: i64,
    pub track_id: String,
    pub category: Category,
    pub center: PointBEV,
    pub occluded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSlot {
    /// Center in the current ego frame.
    pub center: PointBEV,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowInstance {
    pub track_id: String,
    pub category: Category,
    /// `slots[k - 1]` holds the observation from frame `i - k`.
    pub slots: Vec<Option<FlowSlot>>,
}

impl FlowInstance {
    pub fn observed(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }
}

/// Warped historical observations for one current frame, sorted by track id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowFrameSet {
    pub current_frame: i64,
    pub window: usize,
    pub instances: Vec<FlowInstance>,
}

impl FlowFrameSet {
    pub fn empty(current_frame: i64, window: usize) -> Self {
        Self {
            current_frame,
            window,
            instances: Vec::new(),
        }
    }

    pub fn observation_count(&self) -> usize {
        self.instances.iter().map(FlowInstance::observed).sum()
    }
}

/// Record accounting for one parse.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseStats {
    /// Non-blank trajectory lines read.
    pub records: usize,
    /// Observations kept in the flow set.
    pub parsed: usize,
    /// Records whose frame lies outside `[i - n, i - 1]`.
    pub out_of_window: usize,
    /// Category strings outside the closed set, mapped to `other`.
    pub unknown_categories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedFlow {
    pub flow: FlowFrameSet,
    pub stats: ParseStats,
}

/// Reads a pose log into a frame-indexed map.
pub fn read_poses(reader: impl BufRead) -> Result<BTreeMap<i64, RigidPose>, FlowError> {
    let mut poses = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| FlowError::Io {
            log: "pose",
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| FlowError::Malformed {
            log: "pose",
            line: idx + 1,
            message: e.to_string(),
        })?;
        if ![rec.x, rec.y, rec.yaw, rec.t].iter().all(|v| v.is_finite()) {
            return Err(FlowError::Malformed {
                log: "pose",
                line: idx + 1,
                message: "non-finite value".into(),
            });
        }
        if poses.insert(rec.frame, rec.pose()).is_some() {
            return Err(FlowError::Malformed {
                log: "pose",
                line: idx + 1,
                message: format!("duplicate pose for frame {}", rec.frame),
            });
        }
    }
    Ok(poses)
}

/// Reads a trajectory log. Returns the observations and the count of
/// unknown category strings.
pub fn read_observations(
    reader: impl BufRead,
) -> Result<(Vec<ObjectObservation>, usize), FlowError> {
    let mut out = Vec::new();
    let mut unknown = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| FlowError::Io {
            log: "trajectory",
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| FlowError::Malformed {
                log: "trajectory",
                line: idx + 1,
                message: e.to_string(),
            })?;
        if !(rec.x.is_finite() && rec.y.is_finite()) {
            return Err(FlowError::Malformed {
                log: "trajectory",
                line: idx + 1,
                message: "non-finite coordinate".into(),
            });
        }
        let category = Category::parse(&rec.cat).unwrap_or_else(|| {
            unknown += 1;
            Category::Other
        });
        out.push(ObjectObservation {
            frame: rec.frame,
            track_id: rec.id,
            category,
            center: PointBEV::new(rec.x, rec.y),
            occluded: rec.occluded,
        });
    }
    Ok((out, unknown))
}

/// Warps in-window observations into the current frame and groups them by
/// track. Returns the flow set and the number of out-of-window records.
pub fn build_flow(
    observations: &[ObjectObservation],
    poses: &BTreeMap<i64, RigidPose>,
    current_frame: i64,
    window: usize,
) -> Result<(FlowFrameSet, usize), FlowError> {
    if window == 0 {
        return Err(FlowError::InvalidWindow(0));
    }
    let pose_now = poses
        .get(&current_frame)
        .ok_or(FlowError::MissingPose(current_frame))?;
    let mut grouped: BTreeMap<&str, FlowInstance> = BTreeMap::new();
    let mut out_of_window = 0;
    for obs in observations {
        let offset = current_frame - obs.frame;
        if offset < 1 || offset > window as i64 {
            out_of_window += 1;
            continue;
        }
        let pose_past = poses
            .get(&obs.frame)
            .ok_or(FlowError::MissingPose(obs.frame))?;
        let center = compose_relative(pose_now, pose_past).apply(obs.center);
        let inst = grouped
            .entry(obs.track_id.as_str())
            .or_insert_with(|| FlowInstance {
                track_id: obs.track_id.clone(),
                category: obs.category,
                slots: vec![None; window],
            });
        let slot = &mut inst.slots[(offset - 1) as usize];
        if slot.is_some() {
            return Err(FlowError::DuplicateObservation {
                track_id: obs.track_id.clone(),
                frame: obs.frame,
            });
        }
        *slot = Some(FlowSlot {
            center,
            occluded: obs.occluded,
        });
    }
    Ok((
        FlowFrameSet {
            current_frame,
            window,
            instances: grouped.into_values().collect(),
        },
        out_of_window,
    ))
}

/// Parses both logs and produces the aligned flow set for `current_frame`.
pub fn parse_log(
    trajectory: impl BufRead,
    poses: impl BufRead,
    current_frame: i64,
    window: i64,
) -> Result<ParsedFlow, FlowError> {
    if window < 1 {
        return Err(FlowError::InvalidWindow(window));
    }
    let poses = read_poses(poses)?;
    let (observations, unknown) = read_observations(trajectory)?;
    let (flow, out_of_window) = build_flow(&observations, &poses, current_frame, window as usize)?;
    let stats = ParseStats {
        records: observations.len(),
        parsed: flow.observation_count(),
        out_of_window,
        unknown_categories: unknown,
    };
    Ok(ParsedFlow { flow, stats })
}

/// Empties slots whose center lies outside `range` and drops instances left
/// with no observation.
pub fn clip_to_range(flow: &FlowFrameSet, range: &RangeSpec) -> FlowFrameSet {
    let instances = flow
        .instances
        .iter()
        .filter_map(|inst| {
            let slots: Vec<Option<FlowSlot>> = inst
                .slots
                .iter()
                .map(|s| s.filter(|s| range.contains(s.center)))
                .collect();
            slots.iter().any(Option::is_some).then(|| FlowInstance {
                track_id: inst.track_id.clone(),
                category: inst.category,
                slots,
            })
        })
        .collect();
    FlowFrameSet {
        current_frame: flow.current_frame,
        window: flow.window,
        instances,
    }
}
