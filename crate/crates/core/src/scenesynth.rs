//! Synthetic BEV driving scenes with ground truth.
//!
//! Lanes and the ego path are world-frame polylines. Vehicles ride lane
//! centerlines at one speed per lane, pedestrians wander outside every lane
//! corridor, and each (track, frame) pair gets its own occlusion and drop
//! draw. Logs are written in the formats `flow_extract` reads.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::flow_extract::{Category, FlowFrameSet, RangeSpec, TrajectoryRecord};
use crate::geometry::{PointBEV, PoseRecord, RigidPose, RigidTransform};

pub const DEFAULT_LANE_WIDTH: f64 = 3.5;
pub const DEFAULT_CELL: f64 = 0.5;
pub const DEFAULT_MIN_SPACING: f64 = 8.0;

/// Margin kept between pedestrians and the nearest lane corridor edge.
const PEDESTRIAN_MARGIN: f64 = 1.0;
const PEDESTRIAN_SPEED: f64 = 1.2;
const PLACEMENT_ATTEMPTS: usize = 2000;

// RNG stream ids; observation draws use OBSERVATION_STREAM + track index.
const LAYOUT_STREAM: u64 = 1;
const PEDESTRIAN_STREAM: u64 = 2;
const OBSERVATION_STREAM: u64 = 1 << 20;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("infeasible scene: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn default_width() -> f64 {
    DEFAULT_LANE_WIDTH
}
fn default_f_t() -> usize {
    20
}
fn default_dt() -> f64 {
    0.5
}
fn default_ego_speed() -> f64 {
    8.0
}
fn default_min_spacing() -> f64 {
    DEFAULT_MIN_SPACING
}
fn default_cell() -> f64 {
    DEFAULT_CELL
}
fn default_lateral_noise() -> f64 {
    0.12
}
fn default_speed_range() -> [f64; 2] {
    [8.0, 14.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneSpec {
    /// World-frame centerline, meters.
    pub points: Vec<[f64; 2]>,
    #[serde(default = "default_width")]
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub lanes: Vec<LaneSpec>,
    pub n_vehicles: usize,
    pub n_pedestrians: usize,
    pub occlusion_rate: f64,
    pub frame_drop_rate: f64,
    pub frames: usize,
    /// World-frame polyline the ego drives along from its first point.
    pub ego_path: Vec<[f64; 2]>,
    #[serde(default = "default_f_t")]
    pub f_t: usize,
    /// Seconds between frames.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_ego_speed")]
    pub ego_speed: f64,
    #[serde(default = "default_min_spacing")]
    pub min_spacing: f64,
    /// Per-lane vehicle speed is drawn from this interval, m/s.
    #[serde(default = "default_speed_range")]
    pub vehicle_speed: [f64; 2],
    /// Bound on lateral offset from the centerline, as a fraction of lane width.
    #[serde(default = "default_lateral_noise")]
    pub lateral_noise: f64,
    /// Sensor range; also the ground-truth grid extent.
    #[serde(default)]
    pub range: RangeSpec,
    #[serde(default = "default_cell")]
    pub cell: f64,
}

impl Default for SceneSpec {
    /// Two parallel straight lanes with the ego on the right one.
    fn default() -> Self {
        let lane = |y: f64| LaneSpec {
            points: vec![[-150.0, y], [250.0, y]],
            width: DEFAULT_LANE_WIDTH,
        };
        Self {
            seed: 0,
            lanes: vec![lane(0.0), lane(DEFAULT_LANE_WIDTH)],
            n_vehicles: 12,
            n_pedestrians: 2,
            occlusion_rate: 0.2,
            frame_drop_rate: 0.05,
            frames: 21,
            ego_path: vec![[0.0, 0.0], [250.0, 0.0]],
            f_t: default_f_t(),
            dt: default_dt(),
            ego_speed: default_ego_speed(),
            min_spacing: DEFAULT_MIN_SPACING,
            vehicle_speed: default_speed_range(),
            lateral_noise: default_lateral_noise(),
            range: RangeSpec::default(),
            cell: DEFAULT_CELL,
        }
    }
}

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, p) in [
            ("occlusion_rate", self.occlusion_rate),
            ("frame_drop_rate", self.frame_drop_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        if self.frames < self.f_t + 1 || self.frames < 2 {
            return Err(invalid(format!(
                "frames = {} but at least f_t + 1 = {} are needed",
                self.frames,
                self.f_t + 1
            )));
        }
        let positive = [
            ("dt", self.dt),
            ("min_spacing", self.min_spacing),
            ("cell", self.cell),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if !(self.ego_speed.is_finite() && self.ego_speed >= 0.0) {
            return Err(invalid("ego_speed must be non-negative"));
        }
        let [lo, hi] = self.vehicle_speed;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(invalid(
                "vehicle_speed must be an interval of non-negative speeds",
            ));
        }
        if !(0.0..0.4).contains(&self.lateral_noise) {
            return Err(invalid("lateral_noise must be in [0, 0.4)"));
        }
        self.range
            .validate()
            .map_err(|e| invalid(format!("range: {e}")))?;
        if self.ego_path.is_empty() {
            return Err(invalid("ego_path is empty"));
        }
        if self.ego_path.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("ego_path has non-finite points"));
        }
        for (i, lane) in self.lanes.iter().enumerate() {
            if !(lane.width.is_finite() && lane.width > 0.0) {
                return Err(invalid(format!("lane {i}: width must be positive")));
            }
            let line =
                Polyline::new(&lane.points).map_err(|e| invalid(format!("lane {i}: {e}")))?;
            if line.self_intersects() {
                return Err(invalid(format!("lane {i} intersects itself")));
            }
        }
        Ok(())
    }

    /// Vehicles that fit on the lanes at `min_spacing`.
    pub fn lane_capacity(&self) -> usize {
        self.lanes
            .iter()
            .filter_map(|l| Polyline::new(&l.points).ok())
            .map(|p| (p.length() / self.min_spacing).floor() as usize)
            .sum()
    }

    /// A random road: two or three parallel arc lanes through the ego start,
    /// and with probability one half a straight crossing road ahead.
    pub fn sample_road(seed: u64, occlusion_rate: f64, frame_drop_rate: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(LAYOUT_STREAM + 100);
        let n_lanes = rng.random_range(2..=3usize);
        let ego_lane = rng.random_range(0..n_lanes);
        let heading = rng.random_range(-0.3..0.3);
        let curvature = rng.random_range(-1.0 / 150.0..1.0 / 150.0);
        let w = DEFAULT_LANE_WIDTH;
        let mut lanes = Vec::new();
        let mut ego_path = Vec::new();
        for k in 0..n_lanes {
            let offset = (k as f64 - ego_lane as f64) * w;
            let pts: Vec<[f64; 2]> = (0..=175)
                .map(|j| arc_point(heading, curvature, -150.0 + 2.0 * j as f64, offset))
                .collect();
            if k == ego_lane {
                ego_path = (0..=100)
                    .map(|j| arc_point(heading, curvature, 2.0 * j as f64, 0.0))
                    .collect();
            }
            let mut pts = pts;
            if k != ego_lane && rng.random_bool(0.5) {
                pts.reverse();
            }
            lanes.push(LaneSpec {
                points: pts,
                width: w,
            });
        }
        if rng.random_bool(0.5) {
            let ahead = rng.random_range(10.0..40.0);
            let [cx, cy] = arc_point(heading, curvature, ahead, 0.0);
            let cross = heading + PI / 2.0 + rng.random_range(-0.3..0.3);
            let (s, c) = cross.sin_cos();
            let n_cross = rng.random_range(1..=2usize);
            for k in 0..n_cross {
                let off = k as f64 * w;
                let (ox, oy) = (cx + off * c, cy + off * s);
                let mut pts: Vec<[f64; 2]> = (0..=100)
                    .map(|j| {
                        let t = -100.0 + 2.0 * j as f64;
                        [ox + t * c, oy + t * s]
                    })
                    .collect();
                if rng.random_bool(0.5) {
                    pts.reverse();
                }
                lanes.push(LaneSpec {
                    points: pts,
                    width: w,
                });
            }
        }
        Self {
            seed,
            n_vehicles: rng.random_range(24..=40),
            n_pedestrians: rng.random_range(0..=3),
            lanes,
            ego_path,
            occlusion_rate,
            frame_drop_rate,
            ..Self::default()
        }
    }
}

/// Point at arc length `s` along a constant-curvature reference line through
/// the origin with initial `heading`, shifted `offset` meters to the left.
fn arc_point(heading: f64, curvature: f64, s: f64, offset: f64) -> [f64; 2] {
    let theta = heading + curvature * s;
    let (x, y) = if curvature.abs() < 1e-12 {
        (s * heading.cos(), s * heading.sin())
    } else {
        (
            (theta.sin() - heading.sin()) / curvature,
            (heading.cos() - theta.cos()) / curvature,
        )
    };
    [x - offset * theta.sin(), y + offset * theta.cos()]
}

/// Arc-length parameterized polyline.
#[derive(Debug, Clone)]
pub struct Polyline {
    points: Vec<PointBEV>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: &[[f64; 2]]) -> Result<Self, String> {
        if points.len() < 2 {
            return Err("needs at least two points".into());
        }
        let points: Vec<PointBEV> = points.iter().map(|&[x, y]| PointBEV::new(x, y)).collect();
        if points.iter().any(|p| !p.is_finite()) {
            return Err("non-finite point".into());
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let d = w[0].distance(&w[1]);
            if d <= 0.0 {
                return Err("repeated consecutive point".into());
            }
            cumulative.push(cumulative.last().unwrap() + d);
        }
        Ok(Self { points, cumulative })
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("non-empty")
    }

    fn segment_at(&self, s: f64) -> usize {
        let s = s.clamp(0.0, self.length());
        match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        }
    }

    /// Point at arc length `s`, clamped to the ends.
    pub fn point_at(&self, s: f64) -> PointBEV {
        let s = s.clamp(0.0, self.length());
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        let t = (s - self.cumulative[i]) / (self.cumulative[i + 1] - self.cumulative[i]);
        PointBEV::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let i = self.segment_at(s);
        let (a, b) = (self.points[i], self.points[i + 1]);
        (b.y - a.y).atan2(b.x - a.x)
    }

    pub fn distance(&self, p: PointBEV) -> f64 {
        self.points
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// True if two non-adjacent segments touch.
    pub fn self_intersects(&self) -> bool {
        let n = self.points.len() - 1;
        for i in 0..n {
            for j in i + 2..n {
                if segments_intersect(
                    self.points[i],
                    self.points[i + 1],
                    self.points[j],
                    self.points[j + 1],
                ) {
                    return true;
                }
            }
        }
        false
    }

    pub fn points(&self) -> &[PointBEV] {
        &self.points
    }
}

fn segment_distance(p: PointBEV, a: PointBEV, b: PointBEV) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0);
    p.distance(&PointBEV::new(a.x + t * dx, a.y + t * dy))
}

fn cross(o: PointBEV, a: PointBEV, b: PointBEV) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn segments_intersect(p1: PointBEV, p2: PointBEV, q1: PointBEV, q2: PointBEV) -> bool {
    // Cross products below roundoff count as collinear; straight polylines
    // otherwise report spurious crossings.
    let scale = p1.distance(&p2).max(q1.distance(&q2)).max(1.0);
    let eps = 1e-9 * scale * scale;
    let sign = |d: f64| {
        if d.abs() <= eps {
            0
        } else if d > 0.0 {
            1
        } else {
            -1
        }
    };
    let d1 = sign(cross(q1, q2, p1));
    let d2 = sign(cross(q1, q2, p2));
    let d3 = sign(cross(p1, p2, q1));
    let d4 = sign(cross(p1, p2, q2));
    if d1 * d2 < 0 && d3 * d4 < 0 {
        return true;
    }
    let on = |a: PointBEV, b: PointBEV, p: PointBEV, d: i32| {
        d == 0
            && p.x >= a.x.min(b.x) - eps
            && p.x <= a.x.max(b.x) + eps
            && p.y >= a.y.min(b.y) - eps
            && p.y <= a.y.max(b.y) + eps
    };
    on(q1, q2, p1, d1) || on(q1, q2, p2, d2) || on(p1, p2, q1, d3) || on(p1, p2, q2, d4)
}

/// Boolean raster over a range, `cell` meters square. Row index follows x,
/// column index follows y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    pub range: RangeSpec,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(range: RangeSpec, cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let nx = ((range.width() / cell) - 1e-9).ceil().max(1.0) as usize;
        let ny = ((range.height() / cell) - 1e-9).ceil().max(1.0) as usize;
        Self {
            range,
            cell,
            nx,
            ny,
            cells: vec![false; nx * ny],
        }
    }

    /// Cell holding `p`; the closed upper edges belong to the last cell.
    pub fn cell_of(&self, p: PointBEV) -> Option<(usize, usize)> {
        if !self.range.contains(p) {
            return None;
        }
        let ix = (((p.x - self.range.x_min) / self.cell) as usize).min(self.nx - 1);
        let iy = (((p.y - self.range.y_min) / self.cell) as usize).min(self.ny - 1);
        Some((ix, iy))
    }

    pub fn center(&self, ix: usize, iy: usize) -> PointBEV {
        PointBEV::new(
            self.range.x_min + (ix as f64 + 0.5) * self.cell,
            self.range.y_min + (iy as f64 + 0.5) * self.cell,
        )
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[ix * self.ny + iy]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: bool) {
        self.cells[ix * self.ny + iy] = v;
    }

    pub fn mark_point(&mut self, p: PointBEV) {
        if let Some((ix, iy)) = self.cell_of(p) {
            self.set(ix, iy, true);
        }
    }

    /// Marks every cell the segment `a`–`b` passes through (Amanatides-Woo
    /// traversal, clipped to the range).
    pub fn mark_segment(&mut self, a: PointBEV, b: PointBEV) {
        let to_grid = |p: PointBEV| {
            (
                (p.x - self.range.x_min) / self.cell,
                (p.y - self.range.y_min) / self.cell,
            )
        };
        let (x0, y0) = to_grid(a);
        let (x1, y1) = to_grid(b);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let mut ix = x0.floor() as i64;
        let mut iy = y0.floor() as i64;
        let end_x = x1.floor() as i64;
        let end_y = y1.floor() as i64;
        let step_x = if dx > 0.0 { 1 } else { -1 };
        let step_y = if dy > 0.0 { 1 } else { -1 };
        let next = |i: i64, step: i64| if step > 0 { (i + 1) as f64 } else { i as f64 };
        let mut t_max_x = if dx != 0.0 {
            (next(ix, step_x) - x0) / dx
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy != 0.0 {
            (next(iy, step_y) - y0) / dy
        } else {
            f64::INFINITY
        };
        let t_dx = if dx != 0.0 {
            1.0 / dx.abs()
        } else {
            f64::INFINITY
        };
        let t_dy = if dy != 0.0 {
            1.0 / dy.abs()
        } else {
            f64::INFINITY
        };
        let limit = (end_x - ix).unsigned_abs() + (end_y - iy).unsigned_abs() + 1;
        for _ in 0..limit {
            if ix >= 0 && iy >= 0 && (ix as usize) < self.nx && (iy as usize) < self.ny {
                self.set(ix as usize, iy as usize, true);
            }
            if ix == end_x && iy == end_y {
                break;
            }
            if t_max_x < t_max_y {
                ix += step_x;
                t_max_x += t_dx;
            } else {
                iy += step_y;
                t_max_y += t_dy;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Fraction of marked cells that are also set in `truth`; `None` when
    /// nothing is marked.
    pub fn precision_against(&self, truth: &OccupancyGrid) -> Option<f64> {
        assert_eq!(
            (self.nx, self.ny),
            (truth.nx, truth.ny),
            "grid shapes differ"
        );
        let marked = self.count();
        if marked == 0 {
            return None;
        }
        let hits = self
            .cells
            .iter()
            .zip(&truth.cells)
            .filter(|(m, t)| **m && **t)
            .count();
        Some(hits as f64 / marked as f64)
    }

    /// Binary greyscale PGM, forward (+x) up and left (+y) to the left.
    pub fn to_pgm(&self) -> Vec<u8> {
        pgm(
            self.nx,
            self.ny,
            |ix, iy| if self.get(ix, iy) { 255 } else { 0 },
        )
    }
}

/// Renders an `nx × ny` grid as a binary PGM with forward up.
pub fn pgm(nx: usize, ny: usize, shade: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut out = format!("P5\n{ny} {nx}\n255\n").into_bytes();
    for r in 0..nx {
        for c in 0..ny {
            out.push(shade(nx - 1 - r, ny - 1 - c));
        }
    }
    out
}

/// Cells touched by warped vehicle tracks, and separately by pedestrians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowOccupancy {
    pub vehicle: OccupancyGrid,
    pub pedestrian: OccupancyGrid,
}

impl FlowOccupancy {
    /// Overlay for eyeballing: navigable 96, pedestrian 160, vehicle 255.
    pub fn to_pgm(&self, navigable: Option<&OccupancyGrid>) -> Vec<u8> {
        pgm(self.vehicle.nx, self.vehicle.ny, |ix, iy| {
            if self.vehicle.get(ix, iy) {
                255
            } else if self.pedestrian.get(ix, iy) {
                160
            } else if navigable.is_some_and(|g| g.get(ix, iy)) {
                96
            } else {
                0
            }
        })
    }
}

/// Longest run of missing frames bridged when joining observations.
pub const ORACLE_MAX_GAP: usize = 3;

/// Rasterizes unoccluded observations of a flow set. Consecutive
/// observations of one track at most `ORACLE_MAX_GAP` frames apart are
/// joined by the segment between them; isolated ones mark their own cell.
pub fn flow_occupancy_oracle(flow: &FlowFrameSet, range: &RangeSpec, cell: f64) -> FlowOccupancy {
    let mut out = FlowOccupancy {
        vehicle: OccupancyGrid::new(*range, cell),
        pedestrian: OccupancyGrid::new(*range, cell),
    };
    for inst in &flow.instances {
        let grid = match inst.category {
            Category::Pedestrian => &mut out.pedestrian,
            Category::Vehicle => &mut out.vehicle,
            _ => continue,
        };
        // Oldest first.
        let points: Vec<(usize, PointBEV)> = inst
            .slots
            .iter()
            .enumerate()
            .rev()
            .filter_map(|(k, s)| s.filter(|s| !s.occluded).map(|s| (k, s.center)))
            .collect();
        for (i, &(_, p)) in points.iter().enumerate() {
            grid.mark_point(p);
            if let Some(&(k_next, q)) = points.get(i + 1) {
                if points[i].0 - k_next <= ORACLE_MAX_GAP {
                    grid.mark_segment(p, q);
                }
            }
        }
    }
    out
}

/// One object at one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub frame: i64,
    pub id: String,
    pub cat: Category,
    /// World frame.
    pub world: PointBEV,
    /// Ego frame of the last frame.
    pub current: PointBEV,
    /// A trajectory record was written for this state.
    pub emitted: bool,
    pub occluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub current_frame: i64,
    /// Number of lane corridors covering each cell, in the last ego frame.
    pub corridor: Vec<u8>,
    /// `corridor > 0`.
    pub navigable: OccupancyGrid,
    pub objects: Vec<ObjectState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub trajectories: Vec<TrajectoryRecord>,
    pub poses: Vec<PoseRecord>,
    pub truth: GroundTruth,
}

pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const POSE_FILE: &str = "poses.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const NAVIGABLE_PGM: &str = "navigable.pgm";
pub const SPEC_FILE: &str = "scene.json";

fn jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain records serialize"));
        out.push('\n');
    }
    out
}

impl Scene {
    pub fn current_frame(&self) -> i64 {
        self.truth.current_frame
    }

    pub fn trajectory_jsonl(&self) -> String {
        jsonl(&self.trajectories)
    }

    pub fn pose_jsonl(&self) -> String {
        jsonl(&self.poses)
    }

    /// Writes logs, ground truth, the scene spec and a PGM of the navigable grid.
    pub fn write_to(&self, dir: &Path) -> Result<(), SynthError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| SynthError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let truth = serde_json::to_string(&self.truth).expect("ground truth serializes");
        let spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        let files: [(&str, Vec<u8>); 5] = [
            (TRAJECTORY_FILE, self.trajectory_jsonl().into_bytes()),
            (POSE_FILE, self.pose_jsonl().into_bytes()),
            (TRUTH_FILE, truth.into_bytes()),
            (SPEC_FILE, spec.into_bytes()),
            (NAVIGABLE_PGM, self.truth.navigable.to_pgm()),
        ];
        for (name, bytes) in files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Track {
    id: String,
    cat: Category,
    /// World position per frame, `None` once the object has left its lane.
    positions: Vec<Option<PointBEV>>,
}

fn ego_poses(spec: &SceneSpec) -> Vec<RigidPose> {
    if spec.ego_path.len() == 1 {
        let [x, y] = spec.ego_path[0];
        return vec![RigidPose::new(x, y, 0.0); spec.frames];
    }
    let path = Polyline::new(&spec.ego_path).expect("validated");
    (0..spec.frames)
        .map(|f| {
            let s = spec.ego_speed * spec.dt * f as f64;
            let p = path.point_at(s);
            RigidPose::new(p.x, p.y, path.heading_at(s))
        })
        .collect()
}

fn vehicle_tracks(spec: &SceneSpec, lanes: &[Polyline]) -> Result<Vec<Track>, SynthError> {
    let capacity = spec.lane_capacity();
    if spec.n_vehicles > capacity {
        return Err(SynthError::Infeasible(format!(
            "{} vehicles requested but the lanes hold {} at {} m spacing",
            spec.n_vehicles, capacity, spec.min_spacing
        )));
    }
    let mut rng = stream_rng(spec.seed, LAYOUT_STREAM);
    let [lo, hi] = spec.vehicle_speed;
    let lane_setup: Vec<(f64, f64)> = lanes
        .iter()
        .map(|_| {
            let speed = if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            };
            (speed, rng.random_range(0.0..1.0))
        })
        .collect();
    let mut slots: Vec<(usize, usize)> = lanes
        .iter()
        .enumerate()
        .flat_map(|(l, line)| {
            let n = (line.length() / spec.min_spacing).floor() as usize;
            (0..n).map(move |j| (l, j))
        })
        .collect();
    // Partial Fisher-Yates: the first n_vehicles entries are the draw.
    for i in 0..spec.n_vehicles {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut tracks = Vec::with_capacity(spec.n_vehicles);
    for (v, &(l, slot)) in slots[..spec.n_vehicles].iter().enumerate() {
        let line = &lanes[l];
        let width = spec.lanes[l].width;
        let a = spec.lateral_noise * width;
        let (speed, phase) = lane_setup[l];
        // One phase per lane keeps neighbours exactly min_spacing apart.
        let s0 = (slot as f64 + phase) * spec.min_spacing;
        let offset = rng.random_range(-0.8 * a..=0.8 * a);
        let positions = (0..spec.frames)
            .map(|f| {
                let jitter = rng.random_range(-0.2 * a..=0.2 * a);
                let s = s0 + speed * spec.dt * f as f64;
                (s <= line.length()).then(|| {
                    let c = line.point_at(s);
                    let h = line.heading_at(s);
                    let lat = offset + jitter;
                    PointBEV::new(c.x - lat * h.sin(), c.y + lat * h.cos())
                })
            })
            .collect();
        tracks.push(Track {
            id: format!("veh-{v:03}"),
            cat: Category::Vehicle,
            positions,
        });
    }
    Ok(tracks)
}

fn outside_lanes(p: PointBEV, lanes: &[Polyline], widths: &[f64]) -> bool {
    lanes
        .iter()
        .zip(widths)
        .all(|(l, w)| l.distance(p) >= w / 2.0 + PEDESTRIAN_MARGIN)
}

fn pedestrian_tracks(
    spec: &SceneSpec,
    lanes: &[Polyline],
    first_pose: &RigidPose,
) -> Result<Vec<Track>, SynthError> {
    let mut rng = stream_rng(spec.seed, PEDESTRIAN_STREAM);
    let widths: Vec<f64> = spec.lanes.iter().map(|l| l.width).collect();
    let to_world = first_pose.as_transform();
    let r = spec.range;
    let step = PEDESTRIAN_SPEED * spec.dt;
    let mut tracks = Vec::with_capacity(spec.n_pedestrians);
    for k in 0..spec.n_pedestrians {
        let start = (0..PLACEMENT_ATTEMPTS)
            .map(|_| {
                to_world.apply(PointBEV::new(
                    rng.random_range(r.x_min..r.x_max),
                    rng.random_range(r.y_min..r.y_max),
                ))
            })
            .find(|p| outside_lanes(*p, lanes, &widths))
            .ok_or_else(|| {
                SynthError::Infeasible(format!("no room outside the lanes for pedestrian {k}"))
            })?;
        let mut heading: f64 = rng.random_range(-PI..PI);
        let mut p = start;
        let mut positions = Vec::with_capacity(spec.frames);
        for _ in 0..spec.frames {
            positions.push(Some(p));
            heading += rng.random_range(-0.3..0.3);
            let next = PointBEV::new(p.x + step * heading.cos(), p.y + step * heading.sin());
            if outside_lanes(next, lanes, &widths) {
                p = next;
            } else {
                heading += PI;
            }
        }
        tracks.push(Track {
            id: format!("ped-{k:03}"),
            cat: Category::Pedestrian,
            positions,
        });
    }
    Ok(tracks)
}

fn corridor_counts(
    spec: &SceneSpec,
    lanes: &[Polyline],
    current: &RigidTransform,
) -> (Vec<u8>, OccupancyGrid) {
    let mut grid = OccupancyGrid::new(spec.range, spec.cell);
    let mut counts = vec![0u8; grid.nx * grid.ny];
    let to_ego = current.inverse();
    for (line, lane) in lanes.iter().zip(&spec.lanes) {
        let half = lane.width / 2.0;
        let pts: Vec<PointBEV> = line.points().iter().map(|p| to_ego.apply(*p)).collect();
        let mut covered = vec![false; counts.len()];
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let lo_x = a.x.min(b.x) - half;
            let hi_x = a.x.max(b.x) + half;
            let lo_y = a.y.min(b.y) - half;
            let hi_y = a.y.max(b.y) + half;
            if hi_x < spec.range.x_min
                || lo_x > spec.range.x_max
                || hi_y < spec.range.y_min
                || lo_y > spec.range.y_max
            {
                continue;
            }
            let ix0 = ((lo_x - spec.range.x_min) / spec.cell).floor().max(0.0) as usize;
            let ix1 = (((hi_x - spec.range.x_min) / spec.cell).ceil() as usize).min(grid.nx);
            let iy0 = ((lo_y - spec.range.y_min) / spec.cell).floor().max(0.0) as usize;
            let iy1 = (((hi_y - spec.range.y_min) / spec.cell).ceil() as usize).min(grid.ny);
            for ix in ix0..ix1 {
                for iy in iy0..iy1 {
                    if segment_distance(grid.center(ix, iy), a, b) <= half {
                        covered[ix * grid.ny + iy] = true;
                    }
                }
            }
        }
        for (c, hit) in counts.iter_mut().zip(covered) {
            *c = c.saturating_add(hit as u8);
        }
    }
    for (i, c) in counts.iter().enumerate() {
        grid.cells[i] = *c > 0;
    }
    (counts, grid)
}

/// Generates the logs and ground truth for `spec`. Frames are numbered
/// `0..frames`; the last one is the current frame of the ground truth.
pub fn generate(spec: &SceneSpec) -> Result<Scene, SynthError> {
    spec.validate()?;
    let lanes: Vec<Polyline> = spec
        .lanes
        .iter()
        .map(|l| Polyline::new(&l.points).expect("validated"))
        .collect();
    let poses = ego_poses(spec);
    let mut tracks = vehicle_tracks(spec, &lanes)?;
    tracks.extend(pedestrian_tracks(spec, &lanes, &poses[0])?);

    let current = poses[spec.frames - 1].as_transform();
    let current_inv = current.inverse();
    let mut records = Vec::new();
    let mut objects = Vec::new();
    for (k, track) in tracks.iter().enumerate() {
        let mut draws = stream_rng(spec.seed, OBSERVATION_STREAM + k as u64);
        for (f, pos) in track.positions.iter().enumerate() {
            // Both draws happen for every pair so the outcome at one rate is
            // nested inside the outcome at any higher rate.
            let u_drop: f64 = draws.random();
            let u_occ: f64 = draws.random();
            let Some(world) = *pos else { continue };
            let ego = poses[f].as_transform().inverse().apply(world);
            let visible = spec.range.contains(ego);
            let dropped = u_drop < spec.frame_drop_rate;
            let occluded = u_occ < spec.occlusion_rate;
            let emitted = visible && !dropped;
            if emitted {
                records.push(TrajectoryRecord {
                    frame: f as i64,
                    id: track.id.clone(),
                    cat: track.cat.as_str().to_string(),
                    x: ego.x,
                    y: ego.y,
                    occluded,
                });
            }
            objects.push(ObjectState {
                frame: f as i64,
                id: track.id.clone(),
                cat: track.cat,
                world,
                current: current_inv.apply(world),
                emitted,
                occluded: emitted && occluded,
            });
        }
    }
    records.sort_by(|a, b| a.frame.cmp(&b.frame).then_with(|| a.id.cmp(&b.id)));
    objects.sort_by(|a, b| a.frame.cmp(&b.frame).then_with(|| a.id.cmp(&b.id)));

    let pose_records = poses
        .iter()
        .enumerate()
        .map(|(f, p)| PoseRecord {
            frame: f as i64,
            t: f as f64 * spec.dt,
            x: p.x,
            y: p.y,
            yaw: p.yaw,
        })
        .collect();
    let (corridor, navigable) = corridor_counts(spec, &lanes, &current);
    Ok(Scene {
        spec: spec.clone(),
        trajectories: records,
        poses: pose_records,
        truth: GroundTruth {
            current_frame: spec.frames as i64 - 1,
            corridor,
            navigable,
            objects,
        },
    })
}

/// Human-readable one-line summary.
pub fn describe(scene: &Scene) -> String {
    let mut s = String::new();
    let occluded = scene.trajectories.iter().filter(|r| r.occluded).count();
    let _ = write!(
        s,
        "{} lanes, {} records ({} occluded), {} frames, {} navigable cells",
        scene.spec.lanes.len(),
        scene.trajectories.len(),
        occluded,
        scene.poses.len(),
        scene.truth.navigable.count()
    );
    s
}
