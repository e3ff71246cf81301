//! Planar rigid motions (SE(2)) for ego poses and frame-to-frame warping.
//!
//! A pose maps points from the ego frame it describes into the world frame.
//! The transform that carries points observed in a past ego frame into the
//! current ego frame is `pose_now⁻¹ · pose_past`.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let mut a = theta.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// A point in bird's-eye-view coordinates (x forward, y left), meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointBEV {
    pub x: f64,
    pub y: f64,
}

impl PointBEV {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(&self, other: &PointBEV) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Ego pose in a fixed world frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub x: f64,
    pub y: f64,
    /// Heading, radians in `(-π, π]`.
    pub yaw: f64,
}

/// A relative rigid motion between two frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

pub type Matrix3 = [[f64; 3]; 3];

impl RigidPose {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// The ego-to-world map this pose represents.
    pub fn as_transform(&self) -> RigidTransform {
        RigidTransform::new(self.x, self.y, self.yaw)
    }

    pub fn to_matrix(&self) -> Matrix3 {
        self.as_transform().to_matrix()
    }
}

impl RigidTransform {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let (s, c) = self.yaw.sin_cos();
        RigidTransform::new(
            c * other.x - s * other.y + self.x,
            s * other.x + c * other.y + self.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let (s, c) = self.yaw.sin_cos();
        RigidTransform::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.yaw,
        )
    }

    pub fn apply(&self, p: PointBEV) -> PointBEV {
        let (s, c) = self.yaw.sin_cos();
        PointBEV::new(c * p.x - s * p.y + self.x, s * p.x + c * p.y + self.y)
    }

    /// Homogeneous 3×3 form `[[R, t], [0, 1]]`.
    pub fn to_matrix(&self) -> Matrix3 {
        let (s, c) = self.yaw.sin_cos();
        [[c, -s, self.x], [s, c, self.y], [0.0, 0.0, 1.0]]
    }

    /// Reads a homogeneous matrix, rejecting rotation blocks that are not
    /// orthonormal with determinant +1 (tolerance 1e-9).
    pub fn from_matrix(m: &Matrix3) -> Option<RigidTransform> {
        let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
        let det = a * d - b * c;
        let ortho = (a * a + c * c - 1.0).abs() < 1e-9
            && (b * b + d * d - 1.0).abs() < 1e-9
            && (a * b + c * d).abs() < 1e-9;
        let bottom = m[2][0].abs() < 1e-9 && m[2][1].abs() < 1e-9 && (m[2][2] - 1.0).abs() < 1e-9;
        if !(ortho && bottom && (det - 1.0).abs() < 1e-9) {
            return None;
        }
        Some(RigidTransform::new(m[0][2], m[1][2], c.atan2(a)))
    }
}

/// Inverse of the ego-to-world map of `pose`.
pub fn invert(pose: &RigidPose) -> RigidTransform {
    pose.as_transform().inverse()
}

/// Transform carrying points in the `pose_past` ego frame into the
/// `pose_now` ego frame.
pub fn compose_relative(pose_now: &RigidPose, pose_past: &RigidPose) -> RigidTransform {
    invert(pose_now).compose(&pose_past.as_transform())
}

pub fn apply(transform: &RigidTransform, p: PointBEV) -> PointBEV {
    transform.apply(p)
}

/// One line of a pose log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub frame: i64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PoseRecord {
    pub fn pose(&self) -> RigidPose {
        RigidPose::new(self.x, self.y, self.yaw)
    }
}
