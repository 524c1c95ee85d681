//! Frame conventions and rigid-body poses.
//!
//! World frame is a local tangent plane anchored at the first dead-reckoning
//! pose of the mission: x and y horizontal, z positive downward (depth).
//! Orientations use the Z-Y-X Euler convention, `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Point2, Point3, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Wraps an angle to `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let wrapped = PI - (PI - angle).rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2*pi for tiny negative inputs
    if wrapped <= -PI {
        wrapped + 2.0 * PI
    } else {
        wrapped
    }
}

/// 6-DoF pose of the vehicle or of a submap frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose3 {
    pub fn new(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            z,
            roll: normalize_angle(roll),
            pitch: normalize_angle(pitch),
            yaw: normalize_angle(yaw),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.0,
        }
    }

    pub fn from_parts(translation: Vector3<f64>, rotation: &Rotation3<f64>) -> Self {
        let (roll, pitch, yaw) = rotation.euler_angles();
        Self::new(translation.x, translation.y, translation.z, roll, pitch, yaw)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw)
    }

    /// `self` followed by `other`, with `other` expressed in `self`'s frame.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        let r = self.rotation();
        let t = self.translation() + r * other.translation();
        Pose3::from_parts(t, &(r * other.rotation()))
    }

    pub fn inverse(&self) -> Pose3 {
        let r_inv = self.rotation().inverse();
        Pose3::from_parts(-(r_inv * self.translation()), &r_inv)
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn relative(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    /// Planar `(x, y, yaw)` part of the pose.
    pub fn project_se2(&self) -> Pose2 {
        Pose2::new(self.x, self.y, self.yaw)
    }

    /// Replaces x, y and yaw, keeping z, roll and pitch.
    pub fn with_planar(&self, planar: &Pose2) -> Pose3 {
        Pose3::new(planar.x, planar.y, self.z, self.roll, self.pitch, planar.theta)
    }

    /// Maps a point from this frame into the "levelled" frame that shares the
    /// pose's x, y origin and heading but has no roll, pitch or depth offset.
    ///
    /// `transform_point(p) == project_se2().transform_point3(level_point(p))`.
    pub fn level_point(&self, p: &Point3<f64>) -> Point3<f64> {
        let tilt = Rotation3::from_euler_angles(self.roll, self.pitch, 0.0);
        let mut q = tilt * p;
        q.z += self.z;
        q
    }

    /// Inverse of [`Pose3::level_point`].
    pub fn unlevel_point(&self, q: &Point3<f64>) -> Point3<f64> {
        let tilt = Rotation3::from_euler_angles(self.roll, self.pitch, 0.0);
        let mut shifted = *q;
        shifted.z -= self.z;
        tilt.inverse() * shifted
    }
}

/// Planar pose `(x, y, theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        rotation2(self.theta)
    }

    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let t = self.translation() + self.rotation() * other.translation();
        Pose2::new(t.x, t.y, self.theta + other.theta)
    }

    pub fn inverse(&self) -> Pose2 {
        let t = -(self.rotation().transpose() * self.translation());
        Pose2::new(t.x, t.y, -self.theta)
    }

    pub fn relative(&self, other: &Pose2) -> Pose2 {
        let t = self.rotation().transpose() * (other.translation() - self.translation());
        Pose2::new(t.x, t.y, other.theta - self.theta)
    }

    pub fn transform_point(&self, p: &Point2<f64>) -> Point2<f64> {
        Point2::from(self.rotation() * p.coords + self.translation())
    }

    /// Rotates and translates the horizontal part of `p`, leaving z untouched.
    pub fn transform_point3(&self, p: &Point3<f64>) -> Point3<f64> {
        let (s, c) = self.theta.sin_cos();
        Point3::new(
            c * p.x - s * p.y + self.x,
            s * p.x + c * p.y + self.y,
            p.z,
        )
    }

    pub fn lift(&self) -> Pose3 {
        Pose3::new(self.x, self.y, 0.0, 0.0, 0.0, self.theta)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

pub fn rotation2(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Axis-aligned rectangle in the world x-y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Rect {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Self {
        Self {
            min_x,
            min_y,
            max_x,
            max_y,
        }
    }

    /// Bounding rectangle of the horizontal coordinates; `None` for an empty set.
    pub fn from_points<'a, I>(points: I) -> Option<Rect>
    where
        I: IntoIterator<Item = &'a Point3<f64>>,
    {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut r = Rect::new(first.x, first.y, first.x, first.y);
        for p in it {
            r.min_x = r.min_x.min(p.x);
            r.min_y = r.min_y.min(p.y);
            r.max_x = r.max_x.max(p.x);
            r.max_y = r.max_y.max(p.y);
        }
        Some(r)
    }

    pub fn width(&self) -> f64 {
        (self.max_x - self.min_x).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.max_y - self.min_y).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let r = Rect::new(
            self.min_x.max(other.min_x),
            self.min_y.max(other.min_y),
            self.max_x.min(other.max_x),
            self.max_y.min(other.max_y),
        );
        (r.min_x <= r.max_x && r.min_y <= r.max_y).then_some(r)
    }

    pub fn union(&self, other: &Rect) -> Rect {
        Rect::new(
            self.min_x.min(other.min_x),
            self.min_y.min(other.min_y),
            self.max_x.max(other.max_x),
            self.max_y.max(other.max_y),
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }
}
