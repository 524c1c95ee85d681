use std::ops::Range;

use nalgebra::{Matrix3, Point3};

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Pose3, Rect};

/// One multibeam sonar ping.
#[derive(Debug, Clone, PartialEq)]
pub struct Ping {
    pub timestamp: f64,
    /// Dead-reckoning estimate of the sensor pose when the ping was taken.
    pub sensor_pose: Pose3,
    /// Beam returns in the sensor frame.
    pub beams: Vec<Point3<f64>>,
}

/// Checks the per-sequence ping invariants: non-empty beams and strictly
/// increasing timestamps.
pub fn validate_pings(pings: &[Ping]) -> Result<()> {
    for (i, ping) in pings.iter().enumerate() {
        if ping.beams.is_empty() {
            return Err(Error::InvalidInput(format!("ping {i} has no beams")));
        }
        if i > 0 && ping.timestamp <= pings[i - 1].timestamp {
            return Err(Error::InvalidInput(format!(
                "ping {i} timestamp {} does not follow {}",
                ping.timestamp,
                pings[i - 1].timestamp
            )));
        }
    }
    Ok(())
}

/// A rigid aggregate of consecutive pings expressed in its anchor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub id: usize,
    pub anchor: Pose3,
    pub points: Vec<Point3<f64>>,
    /// World x-y bounds of `anchor ∘ points`.
    pub bounds_xy: Rect,
    /// Indices of the pings aggregated into this submap.
    pub ping_range: Range<usize>,
}

impl Submap {
    pub fn new(id: usize, anchor: Pose3, points: Vec<Point3<f64>>, ping_range: Range<usize>) -> Self {
        let bounds_xy = world_bounds(&anchor, &points);
        Self {
            id,
            anchor,
            points,
            bounds_xy,
            ping_range,
        }
    }

    pub fn world_points(&self) -> Vec<Point3<f64>> {
        let r = self.anchor.rotation();
        let t = self.anchor.translation();
        self.points.iter().map(|p| Point3::from(r * p.coords + t)).collect()
    }

    /// Points in the anchor's levelled frame (roll, pitch and depth applied,
    /// planar pose not yet applied).
    pub fn levelled_points(&self) -> Vec<Point3<f64>> {
        self.points.iter().map(|p| self.anchor.level_point(p)).collect()
    }

    /// World points if the anchor's planar part were `planar`.
    pub fn world_points_at(&self, planar: &Pose2) -> Vec<Point3<f64>> {
        self.points
            .iter()
            .map(|p| planar.transform_point3(&self.anchor.level_point(p)))
            .collect()
    }

    pub fn bounds_at(&self, planar: &Pose2) -> Rect {
        world_bounds(&self.anchor.with_planar(planar), &self.points)
    }

    /// Copy with the anchor's x, y and yaw replaced.
    pub fn with_planar(&self, planar: &Pose2) -> Submap {
        Submap::new(
            self.id,
            self.anchor.with_planar(planar),
            self.points.clone(),
            self.ping_range.clone(),
        )
    }

    pub fn with_points(&self, points: Vec<Point3<f64>>) -> Submap {
        Submap::new(self.id, self.anchor, points, self.ping_range.clone())
    }
}

fn world_bounds(anchor: &Pose3, points: &[Point3<f64>]) -> Rect {
    let r = anchor.rotation();
    let t = anchor.translation();
    let world: Vec<Point3<f64>> = points.iter().map(|p| Point3::from(r * p.coords + t)).collect();
    Rect::from_points(&world).unwrap_or_else(|| Rect::new(anchor.x, anchor.y, anchor.x, anchor.y))
}

/// Planar relative pose with a Gaussian information matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianRelativePose {
    pub mean: Pose2,
    pub information: Matrix3<f64>,
}

impl GaussianRelativePose {
    pub fn new(mean: Pose2, information: Matrix3<f64>) -> Result<Self> {
        check_information(&information)?;
        Ok(Self { mean, information })
    }

    /// Information from a diagonal covariance `diag(var_x, var_y, var_theta)`.
    pub fn from_variances(mean: Pose2, var_x: f64, var_y: f64, var_theta: f64) -> Result<Self> {
        Self::new(
            mean,
            Matrix3::from_diagonal(&nalgebra::Vector3::new(
                1.0 / var_x,
                1.0 / var_y,
                1.0 / var_theta,
            )),
        )
    }
}

pub fn check_information(information: &Matrix3<f64>) -> Result<()> {
    if information.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("non-finite entry".into()));
    }
    let asym = (information - information.transpose()).abs().max();
    let scale = information.abs().max().max(1.0);
    if asym > 1e-9 * scale {
        return Err(Error::NotPositiveDefinite(format!("asymmetry {asym:e}")));
    }
    if information.cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("Cholesky factorization failed".into()));
    }
    Ok(())
}
