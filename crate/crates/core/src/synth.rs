//! Synthetic seabed, lawnmower surveys and multibeam returns.
//!
//! Everything here is a pure function of its inputs and seed.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Point3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Pose3, Rect};
use crate::measurement::Ping;

/// Regular grid of seabed depths, sampled at nodes and bilinearly interpolated.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major depths, `depths[j * nx + i]` at `(origin_x + i * cell, origin_y + j * cell)`.
    pub depths: Vec<f64>,
}

impl Heightfield {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64, nx: usize, ny: usize, depths: Vec<f64>) -> Result<Self> {
        if !(cell_size > 0.0) || nx < 2 || ny < 2 || depths.len() != nx * ny {
            return Err(Error::InvalidInput(format!(
                "heightfield needs cell_size > 0 and at least 2x2 nodes (got {nx}x{ny}, {} depths)",
                depths.len()
            )));
        }
        if depths.iter().any(|d| !d.is_finite()) {
            return Err(Error::InvalidInput("heightfield depths must be finite".into()));
        }
        Ok(Self { origin_x, origin_y, cell_size, nx, ny, depths })
    }

    pub fn flat(extent: Rect, cell_size: f64, depth: f64) -> Result<Self> {
        let nx = (extent.width() / cell_size).ceil() as usize + 1;
        let ny = (extent.height() / cell_size).ceil() as usize + 1;
        Self::new(extent.min_x, extent.min_y, cell_size, nx, ny, vec![depth; nx * ny])
    }

    pub fn extent(&self) -> Rect {
        Rect::new(
            self.origin_x,
            self.origin_y,
            self.origin_x + (self.nx - 1) as f64 * self.cell_size,
            self.origin_y + (self.ny - 1) as f64 * self.cell_size,
        )
    }

    pub fn node(&self, i: usize, j: usize) -> f64 {
        self.depths[j * self.nx + i]
    }

    /// Bilinear depth at `(x, y)`; `None` outside the grid.
    pub fn depth(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.origin_x) / self.cell_size;
        let v = (y - self.origin_y) / self.cell_size;
        let max_u = (self.nx - 1) as f64;
        let max_v = (self.ny - 1) as f64;
        if !(0.0..=max_u).contains(&u) || !(0.0..=max_v).contains(&v) {
            return None;
        }
        let i = (u.floor() as usize).min(self.nx - 2);
        let j = (v.floor() as usize).min(self.ny - 2);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let d00 = self.node(i, j);
        let d10 = self.node(i + 1, j);
        let d01 = self.node(i, j + 1);
        let d11 = self.node(i + 1, j + 1);
        Some(
            d00 * (1.0 - fu) * (1.0 - fv)
                + d10 * fu * (1.0 - fv)
                + d01 * (1.0 - fu) * fv
                + d11 * fu * fv,
        )
    }

    pub fn median_depth(&self) -> f64 {
        let mut d = self.depths.clone();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainSpec {
    pub extent_x: f64,
    pub extent_y: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub base_depth: f64,
    /// Fraction of the area carrying relief; 0 is a flat plane, 1 is featured everywhere.
    pub feature_mix: f64,
    /// Peak amplitude of the relief in meters.
    pub relief: f64,
    pub seed: u64,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            extent_x: 260.0,
            extent_y: 200.0,
            origin_x: -30.0,
            origin_y: -60.0,
            cell_size: 1.0,
            base_depth: 30.0,
            feature_mix: 1.0,
            relief: 4.0,
            seed: 7,
        }
    }
}

impl TerrainSpec {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("extent_x", self.extent_x),
            ("extent_y", self.extent_y),
            ("cell_size", self.cell_size),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("terrain.{name} must be positive (got {v})")));
            }
        }
        if self.cell_size >= self.extent_x.min(self.extent_y) {
            return Err(Error::Config("terrain.cell_size must be smaller than the extent".into()));
        }
        if !(0.0..=1.0).contains(&self.feature_mix) {
            return Err(Error::Config(format!(
                "terrain.feature_mix must lie in [0, 1] (got {})",
                self.feature_mix
            )));
        }
        if !(self.relief >= 0.0) || !self.base_depth.is_finite() {
            return Err(Error::Config("terrain.relief must be >= 0 and base_depth finite".into()));
        }
        Ok(())
    }
}

/// Smooth value noise on a square lattice, interpolated with smoothstep weights.
struct ValueNoise {
    spacing: f64,
    nx: usize,
    values: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: f64, height: f64, spacing: f64) -> Self {
        let nx = (width / spacing).ceil() as usize + 2;
        let ny = (height / spacing).ceil() as usize + 2;
        let values = (0..nx * ny).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { spacing, nx, values }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let gu = u / self.spacing;
        let gv = v / self.spacing;
        let i = gu.floor() as usize;
        let j = gv.floor() as usize;
        let s = smoothstep(gu - i as f64);
        let t = smoothstep(gv - j as f64);
        let at = |a: usize, b: usize| self.values[b * self.nx + a];
        let top = at(i, j) * (1.0 - s) + at(i + 1, j) * s;
        let bottom = at(i, j + 1) * (1.0 - s) + at(i + 1, j + 1) * s;
        top * (1.0 - t) + bottom * t
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

struct Hill {
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
}

struct Ripple {
    kx: f64,
    ky: f64,
    phase: f64,
    amplitude: f64,
}

/// Layered smooth noise plus Gaussian hills and sinusoidal ripples, masked so
/// that roughly `feature_mix` of the area carries relief.
pub fn generate_terrain(spec: &TerrainSpec) -> Result<Heightfield> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nx = (spec.extent_x / spec.cell_size).round() as usize + 1;
    let ny = (spec.extent_y / spec.cell_size).round() as usize + 1;
    let width = (nx - 1) as f64 * spec.cell_size;
    let height = (ny - 1) as f64 * spec.cell_size;

    let hill_count = ((width * height) / 1500.0).ceil().max(1.0) as usize;
    let hills: Vec<Hill> = (0..hill_count)
        .map(|_| Hill {
            cx: rng.random_range(0.0..width),
            cy: rng.random_range(0.0..height),
            sigma: rng.random_range(5.0..14.0),
            amplitude: rng.random_range(-1.0..1.0),
        })
        .collect();
    let ripples: Vec<Ripple> = (0..2)
        .map(|_| {
            let wavelength: f64 = rng.random_range(7.0..18.0);
            let dir: f64 = rng.random_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            Ripple {
                kx: k * dir.cos(),
                ky: k * dir.sin(),
                phase: rng.random_range(0.0..2.0 * PI),
                amplitude: 0.12,
            }
        })
        .collect();
    let detail = ValueNoise::new(&mut rng, width, height, 10.0);
    let fine = ValueNoise::new(&mut rng, width, height, 4.0);
    let mask_noise = ValueNoise::new(&mut rng, width, height, 50.0);

    let mut relief = vec![0.0; nx * ny];
    let mut mask_raw = vec![0.0; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let u = i as f64 * spec.cell_size;
            let v = j as f64 * spec.cell_size;
            let mut h = 0.0;
            for hill in &hills {
                let r2 = (u - hill.cx).powi(2) + (v - hill.cy).powi(2);
                h += hill.amplitude * (-0.5 * r2 / (hill.sigma * hill.sigma)).exp();
            }
            for r in &ripples {
                h += r.amplitude * (r.kx * u + r.ky * v + r.phase).sin();
            }
            h += 0.35 * detail.sample(u, v) + 0.1 * fine.sample(u, v);
            relief[j * nx + i] = h;
            mask_raw[j * nx + i] = mask_noise.sample(u, v);
        }
    }

    let mask: Vec<f64> = if spec.feature_mix >= 1.0 {
        vec![1.0; nx * ny]
    } else if spec.feature_mix <= 0.0 {
        vec![0.0; nx * ny]
    } else {
        let mut sorted = mask_raw.clone();
        sorted.sort_by(f64::total_cmp);
        let idx = ((1.0 - spec.feature_mix) * (sorted.len() - 1) as f64).round() as usize;
        let threshold = sorted[idx];
        mask_raw
            .iter()
            .map(|&m| smoothstep((m - threshold) / 0.1 + 0.5))
            .collect()
    };

    // shallower relief reads as negative depth offset
    let depths = relief
        .iter()
        .zip(&mask)
        .map(|(h, m)| spec.base_depth - spec.relief * m * h)
        .collect();
    Heightfield::new(spec.origin_x, spec.origin_y, spec.cell_size, nx, ny, depths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurveyPlan {
    pub swath_count: usize,
    /// Lateral distance between adjacent survey lines. When zero it is
    /// derived from `overlap` and the flat-bottom swath width.
    pub swath_spacing: f64,
    pub overlap: f64,
    pub line_length: f64,
    pub start_x: f64,
    pub start_y: f64,
    pub speed: f64,
    pub ping_rate: f64,
    pub beam_count: usize,
    pub beam_aperture: f64,
    pub altitude: f64,
    /// Amplitude in radians of slow roll and pitch oscillations.
    pub attitude_amplitude: f64,
}

impl Default for SurveyPlan {
    fn default() -> Self {
        Self {
            swath_count: 2,
            swath_spacing: 0.0,
            overlap: 0.3,
            line_length: 200.0,
            start_x: 0.0,
            start_y: 0.0,
            speed: 1.0,
            ping_rate: 3.0,
            beam_count: 256,
            beam_aperture: 120f64.to_radians(),
            altitude: 15.0,
            attitude_amplitude: 0.01,
        }
    }
}

impl SurveyPlan {
    pub fn validate(&self) -> Result<()> {
        if self.swath_count == 0 || self.beam_count == 0 {
            return Err(Error::Config("survey.swath_count and survey.beam_count must be positive".into()));
        }
        let pos = [
            ("line_length", self.line_length),
            ("speed", self.speed),
            ("ping_rate", self.ping_rate),
            ("beam_aperture", self.beam_aperture),
            ("altitude", self.altitude),
        ];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("survey.{name} must be positive (got {v})")));
            }
        }
        if self.beam_aperture >= PI {
            return Err(Error::Config("survey.beam_aperture must be below pi".into()));
        }
        if self.swath_spacing < 0.0 || !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("survey.swath_spacing must be >= 0 and overlap in [0, 1)".into()));
        }
        if self.swath_count > 1 && self.spacing() <= 0.0 {
            return Err(Error::Config("survey spacing resolves to zero".into()));
        }
        Ok(())
    }

    /// Across-track coverage over a flat bottom.
    pub fn swath_width(&self) -> f64 {
        2.0 * self.altitude * (self.beam_aperture / 2.0).tan()
    }

    pub fn spacing(&self) -> f64 {
        if self.swath_spacing > 0.0 {
            self.swath_spacing
        } else {
            self.swath_width() * (1.0 - self.overlap)
        }
    }

    /// Lawnmower path: straight lines along x joined by semicircular turns.
    pub fn segments(&self) -> Vec<Segment> {
        let spacing = self.spacing();
        let radius = spacing / 2.0;
        let x0 = self.start_x;
        let x1 = self.start_x + self.line_length;
        let mut out = Vec::new();
        for k in 0..self.swath_count {
            let y = self.start_y + k as f64 * spacing;
            let forward = k % 2 == 0;
            out.push(if forward {
                Segment::Line { from: (x0, y), to: (x1, y) }
            } else {
                Segment::Line { from: (x1, y), to: (x0, y) }
            });
            if k + 1 < self.swath_count {
                out.push(Segment::Turn {
                    center: (if forward { x1 } else { x0 }, y + radius),
                    radius,
                    left: forward,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line { from: (f64, f64), to: (f64, f64) },
    /// Half circle starting south of `center`; `left` turns counter-clockwise.
    Turn { center: (f64, f64), radius: f64, left: bool },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { from, to } => ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt(),
            Segment::Turn { radius, .. } => PI * radius,
        }
    }

    /// Planar pose after travelling `s` meters along the segment.
    pub fn at(&self, s: f64) -> Pose2 {
        match *self {
            Segment::Line { from, to } => {
                let len = self.length();
                let f = if len > 0.0 { s / len } else { 0.0 };
                Pose2::new(
                    from.0 + f * (to.0 - from.0),
                    from.1 + f * (to.1 - from.1),
                    (to.1 - from.1).atan2(to.0 - from.0),
                )
            }
            Segment::Turn { center, radius, left } => {
                let swept = s / radius;
                let (phi, heading) = if left {
                    let phi = -FRAC_PI_2 + swept;
                    (phi, phi + FRAC_PI_2)
                } else {
                    let phi = 1.5 * PI - swept;
                    (phi, phi - FRAC_PI_2)
                };
                Pose2::new(center.0 + radius * phi.cos(), center.1 + radius * phi.sin(), heading)
            }
        }
    }
}

/// Ground-truth pings and vehicle poses from a simulated survey.
#[derive(Debug, Clone)]
pub struct SimulatedSurvey {
    pub pings: Vec<Ping>,
    pub truth_poses: Vec<Pose3>,
}

/// Unit beam directions in the sensor frame: an across-track fan in the y-z plane.
pub fn beam_directions(beam_count: usize, aperture: f64) -> Vec<Vector3<f64>> {
    (0..beam_count)
        .map(|b| {
            let angle = if beam_count == 1 {
                0.0
            } else {
                -aperture / 2.0 + aperture * b as f64 / (beam_count - 1) as f64
            };
            Vector3::new(0.0, angle.sin(), angle.cos())
        })
        .collect()
}

/// First intersection of a ray with the heightfield, or `None` when the ray
/// exits the grid or exceeds `max_range` first.
pub fn cast_ray(terrain: &Heightfield, origin: &Point3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<Point3<f64>> {
    let clearance = |t: f64| -> Option<f64> {
        let p = origin + dir * t;
        terrain.depth(p.x, p.y).map(|d| d - p.z)
    };
    let step = terrain.cell_size / 2.0;
    let mut t_prev = 0.0;
    if clearance(0.0)? <= 0.0 {
        return None;
    }
    let mut t = step;
    while t_prev < max_range {
        let t_cur = t.min(max_range);
        let g = clearance(t_cur)?;
        if g <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t_cur);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                match clearance(mid) {
                    Some(v) if v > 0.0 => lo = mid,
                    _ => hi = mid,
                }
            }
            let hit = origin + dir * hi;
            // land exactly on the interpolated surface
            let depth = terrain.depth(hit.x, hit.y)?;
            return Some(Point3::new(hit.x, hit.y, depth));
        }
        t_prev = t_cur;
        t += step;
    }
    None
}

/// Flies the plan over the terrain and ray-casts every beam of every ping.
///
/// Vehicle depth is held at the terrain's median depth minus `altitude`.
/// Beams that miss the grid are dropped; a ping whose beams all miss is
/// dropped too.
pub fn simulate_survey(terrain: &Heightfield, plan: &SurveyPlan) -> Result<SimulatedSurvey> {
    plan.validate()?;
    let segments = plan.segments();
    let extent = terrain.extent();
    for (idx, seg) in segments.iter().enumerate() {
        let samples = (seg.length() / terrain.cell_size).ceil().max(1.0) as usize;
        for k in 0..=samples {
            let p = seg.at(seg.length() * k as f64 / samples as f64);
            if !extent.contains(p.x, p.y) {
                return Err(Error::OutsideTerrain {
                    segment: idx,
                    detail: format!(
                        "{seg:?} reaches ({:.2}, {:.2}) outside [{:.2}, {:.2}] x [{:.2}, {:.2}]",
                        p.x, p.y, extent.min_x, extent.max_x, extent.min_y, extent.max_y
                    ),
                });
            }
        }
    }

    let vehicle_z = terrain.median_depth() - plan.altitude;
    let dirs = beam_directions(plan.beam_count, plan.beam_aperture);
    let max_range = 20.0 * plan.altitude;
    let total: f64 = segments.iter().map(Segment::length).sum();
    let spacing = plan.speed / plan.ping_rate;
    let ping_count = (total / spacing).floor() as usize + 1;

    let mut pings = Vec::with_capacity(ping_count);
    let mut truth = Vec::with_capacity(ping_count);
    let mut seg_idx = 0;
    let mut seg_start = 0.0;
    for k in 0..ping_count {
        let s = k as f64 * spacing;
        while seg_idx + 1 < segments.len() && s > seg_start + segments[seg_idx].length() {
            seg_start += segments[seg_idx].length();
            seg_idx += 1;
        }
        let planar = segments[seg_idx].at((s - seg_start).min(segments[seg_idx].length()));
        let t = k as f64 / plan.ping_rate;
        let roll = plan.attitude_amplitude * (0.31 * t).sin();
        let pitch = plan.attitude_amplitude * (0.17 * t + 0.5).sin();
        let pose = Pose3::new(planar.x, planar.y, vehicle_z, roll, pitch, planar.theta);
        let rot = pose.rotation();
        let origin = Point3::from(pose.translation());
        let inv = pose.inverse();
        let beams: Vec<Point3<f64>> = dirs
            .iter()
            .filter_map(|d| cast_ray(terrain, &origin, &(rot * d), max_range))
            .map(|w| inv.transform_point(&w))
            .collect();
        if beams.is_empty() {
            continue;
        }
        pings.push(Ping { timestamp: t, sensor_pose: pose, beams });
        truth.push(pose);
    }
    Ok(SimulatedSurvey { pings, truth_poses: truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftModel {
    /// Standard deviation of the x and y increments per submap interval, meters.
    pub sigma_xy: f64,
    /// Standard deviation of the heading increment per submap interval, radians.
    pub sigma_theta: f64,
    pub seed: u64,
}

impl Default for DriftModel {
    fn default() -> Self {
        Self { sigma_xy: 0.6, sigma_theta: 0.004, seed: 11 }
    }
}

impl DriftModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_xy >= 0.0) || !(self.sigma_theta >= 0.0) {
            return Err(Error::Config("drift sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

/// Accumulates a planar random walk at each submap boundary.
///
/// Each boundary draws `(dx, dy, dtheta)`; the heading part pivots about the
/// vehicle's already-corrupted position at the boundary. The correction is a
/// rigid planar transform applied on the left of every later pose, so poses
/// inside one interval keep their exact relative geometry.
pub fn corrupt_navigation(truth: &[Pose3], boundaries: &[usize], model: &DriftModel) -> Vec<Pose3> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut correction = Pose2::identity();
    let mut out = Vec::with_capacity(truth.len());
    let mut next = boundaries.iter().copied().filter(|&b| b > 0 && b < truth.len()).peekable();
    for (k, pose) in truth.iter().enumerate() {
        while next.peek() == Some(&k) {
            next.next();
            let dx = model.sigma_xy * normal.sample(&mut rng);
            let dy = model.sigma_xy * normal.sample(&mut rng);
            let dtheta = model.sigma_theta * normal.sample(&mut rng);
            let pivot = correction.compose(&pose.project_se2());
            // rotate about the pivot, then shift
            let about = Pose2::new(pivot.x, pivot.y, 0.0)
                .compose(&Pose2::new(0.0, 0.0, dtheta))
                .compose(&Pose2::new(-pivot.x, -pivot.y, 0.0));
            correction = Pose2::new(dx, dy, 0.0).compose(&about).compose(&correction);
        }
        out.push(apply_planar_correction(&correction, pose));
    }
    out
}

fn apply_planar_correction(correction: &Pose2, pose: &Pose3) -> Pose3 {
    let planar = correction.compose(&pose.project_se2());
    pose.with_planar(&planar)
}

/// Gaussian range jitter and sparse gross range outliers, returned with a
/// per-beam outlier label.
pub fn add_beam_noise_labeled(
    pings: &[Ping],
    sigma_range: f64,
    outlier_rate: f64,
    seed: u64,
) -> Result<(Vec<Ping>, Vec<Vec<bool>>)> {
    if !(sigma_range >= 0.0) || !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::InvalidInput(format!(
            "beam noise needs sigma_range >= 0 and outlier_rate in [0, 1) (got {sigma_range}, {outlier_rate})"
        )));
    }
    if sigma_range == 0.0 && outlier_rate == 0.0 {
        let labels = pings.iter().map(|p| vec![false; p.beams.len()]).collect();
        return Ok((pings.to_vec(), labels));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let min_offset = outlier_offset_floor(sigma_range);
    let mut labels = Vec::with_capacity(pings.len());
    let noisy = pings
        .iter()
        .map(|ping| {
            let mut ping_labels = Vec::with_capacity(ping.beams.len());
            let beams = ping
                .beams
                .iter()
                .map(|b| {
                    let range = b.coords.norm();
                    let unit = b.coords / range;
                    let mut delta = sigma_range * normal.sample(&mut rng);
                    let outlier = outlier_rate > 0.0 && rng.random_bool(outlier_rate);
                    if outlier {
                        let magnitude = rng.random_range(min_offset..min_offset + OUTLIER_SPAN);
                        let shallower = rng.random_bool(0.5) && range - magnitude > 0.5;
                        delta = if shallower { -magnitude } else { magnitude };
                    }
                    ping_labels.push(outlier);
                    Point3::from(unit * (range + delta))
                })
                .collect();
            labels.push(ping_labels);
            Ping { beams, ..ping.clone() }
        })
        .collect();
    Ok((noisy, labels))
}

pub fn add_beam_noise(pings: &[Ping], sigma_range: f64, outlier_rate: f64, seed: u64) -> Result<Vec<Ping>> {
    add_beam_noise_labeled(pings, sigma_range, outlier_rate, seed).map(|(p, _)| p)
}

const OUTLIER_SPAN: f64 = 10.0;

/// Smallest range displacement given to an outlier beam.
pub fn outlier_offset_floor(sigma_range: f64) -> f64 {
    10.0 * sigma_range + 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_spec(mix: f64, seed: u64) -> TerrainSpec {
        TerrainSpec {
            extent_x: 100.0,
            extent_y: 100.0,
            origin_x: 0.0,
            origin_y: 0.0,
            cell_size: 0.5,
            feature_mix: mix,
            seed,
            ..TerrainSpec::default()
        }
    }

    fn flat_plan() -> SurveyPlan {
        SurveyPlan {
            swath_count: 1,
            line_length: 40.0,
            start_x: 10.0,
            start_y: 50.0,
            beam_count: 21,
            attitude_amplitude: 0.0,
            ..SurveyPlan::default()
        }
    }

    #[test]
    fn flat_mix_gives_constant_depth() {
        let h = generate_terrain(&small_spec(0.0, 3)).unwrap();
        assert!(h.depths.iter().all(|&d| d == 30.0));
    }

    #[test]
    fn same_seed_same_grid() {
        let a = generate_terrain(&small_spec(0.6, 9)).unwrap();
        let b = generate_terrain(&small_spec(0.6, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_terrain(&small_spec(0.6, 10)).unwrap();
        assert_ne!(a.depths, c.depths);
    }

    #[test]
    fn featured_terrain_has_variance() {
        let spec = TerrainSpec { extent_x: 199.0, extent_y: 199.0, cell_size: 1.0, ..small_spec(1.0, 5) };
        let h = generate_terrain(&spec).unwrap();
        assert_eq!(h.nx * h.ny, 200 * 200);
        let mean = h.depths.iter().sum::<f64>() / h.depths.len() as f64;
        let var = h.depths.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / h.depths.len() as f64;
        assert!(var > 0.1, "variance {var}");
    }

    #[test]
    fn partial_mix_leaves_flat_sections() {
        let h = generate_terrain(&small_spec(0.3, 5)).unwrap();
        let flat = h.depths.iter().filter(|&&d| d == 30.0).count() as f64 / h.depths.len() as f64;
        assert!(flat > 0.3 && flat < 0.95, "flat fraction {flat}");
    }

    #[test]
    fn invalid_terrain_spec_is_rejected() {
        assert!(generate_terrain(&TerrainSpec { cell_size: 0.0, ..small_spec(1.0, 1) }).is_err());
        assert!(generate_terrain(&TerrainSpec { feature_mix: 1.5, ..small_spec(1.0, 1) }).is_err());
    }

    #[test]
    fn bilinear_matches_nodes_and_rejects_outside() {
        let h = generate_terrain(&small_spec(1.0, 2)).unwrap();
        assert_eq!(h.depth(0.0, 0.0), Some(h.node(0, 0)));
        assert_abs_diff_eq!(h.depth(1.5, 2.0).unwrap(), h.node(3, 4), epsilon = 1e-12);
        assert_eq!(h.depth(-0.1, 3.0), None);
        assert_eq!(h.depth(3.0, 100.5), None);
    }

    #[test]
    fn flat_nadir_range_equals_altitude() {
        let h = generate_terrain(&small_spec(0.0, 1)).unwrap();
        let plan = SurveyPlan { beam_count: 1, ..flat_plan() };
        let s = simulate_survey(&h, &plan).unwrap();
        assert!(!s.pings.is_empty());
        for p in &s.pings {
            assert_eq!(p.beams.len(), 1);
            assert_abs_diff_eq!(p.beams[0].coords.norm(), plan.altitude, epsilon = 1e-9);
        }
    }

    #[test]
    fn beams_lie_on_terrain() {
        let h = generate_terrain(&small_spec(1.0, 4)).unwrap();
        let plan = SurveyPlan { attitude_amplitude: 0.03, ..flat_plan() };
        let s = simulate_survey(&h, &plan).unwrap();
        for (ping, pose) in s.pings.iter().zip(&s.truth_poses) {
            for b in &ping.beams {
                let w = pose.transform_point(b);
                let d = h.depth(w.x, w.y).unwrap();
                assert!((w.z - d).abs() < 1e-6, "off surface by {}", w.z - d);
            }
        }
    }

    #[test]
    fn trajectory_outside_terrain_is_reported() {
        let h = generate_terrain(&small_spec(0.0, 1)).unwrap();
        let plan = SurveyPlan { line_length: 500.0, ..flat_plan() };
        match simulate_survey(&h, &plan) {
            Err(Error::OutsideTerrain { segment, .. }) => assert_eq!(segment, 0),
            other => panic!("expected OutsideTerrain, got {other:?}"),
        }
    }

    #[test]
    fn lawnmower_turn_joins_lines() {
        let plan = SurveyPlan { swath_count: 3, swath_spacing: 30.0, ..SurveyPlan::default() };
        let segs = plan.segments();
        assert_eq!(segs.len(), 5);
        for w in segs.windows(2) {
            let end = w[0].at(w[0].length());
            let start = w[1].at(0.0);
            assert_abs_diff_eq!(end.x, start.x, epsilon = 1e-9);
            assert_abs_diff_eq!(end.y, start.y, epsilon = 1e-9);
            assert!(crate::geometry::normalize_angle(end.theta - start.theta).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_drift_is_identity() {
        let truth: Vec<Pose3> = (0..20).map(|k| Pose3::new(k as f64, 0.5 * k as f64, 10.0, 0.0, 0.0, 0.1)).collect();
        let model = DriftModel { sigma_xy: 0.0, sigma_theta: 0.0, seed: 1 };
        assert_eq!(corrupt_navigation(&truth, &[5, 10], &model), truth);
    }

    #[test]
    fn single_boundary_shifts_rigidly() {
        let truth: Vec<Pose3> = (0..20).map(|k| Pose3::new(k as f64, 0.0, 10.0, 0.0, 0.0, 0.0)).collect();
        let model = DriftModel { sigma_xy: 1.0, sigma_theta: 0.0, seed: 4 };
        let dr = corrupt_navigation(&truth, &[8], &model);
        assert_eq!(&dr[..8], &truth[..8]);
        let shift = (dr[8].x - truth[8].x, dr[8].y - truth[8].y);
        assert!(shift.0.abs() + shift.1.abs() > 0.0);
        for k in 8..20 {
            assert_abs_diff_eq!(dr[k].x - truth[k].x, shift.0, epsilon = 1e-12);
            assert_abs_diff_eq!(dr[k].y - truth[k].y, shift.1, epsilon = 1e-12);
            assert_eq!(dr[k].z, truth[k].z);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn drift_preserves_intra_interval_geometry(seed in 0u64..10_000) {
            let truth: Vec<Pose3> = (0..60)
                .map(|k| {
                    let a = k as f64 * 0.05;
                    Pose3::new(20.0 * a.cos(), 20.0 * a.sin(), 12.0, 0.01 * a, -0.02, a + 1.0)
                })
                .collect();
            let boundaries = [7, 19, 33, 48];
            let dr = corrupt_navigation(&truth, &boundaries, &DriftModel { sigma_xy: 2.0, sigma_theta: 0.1, seed });
            let mut edges = vec![0];
            edges.extend(boundaries);
            edges.push(truth.len());
            for w in edges.windows(2) {
                for k in w[0]..w[1] - 1 {
                    let t = truth[k].relative(&truth[k + 1]);
                    let d = dr[k].relative(&dr[k + 1]);
                    prop_assert!((t.x - d.x).abs() < 1e-9 && (t.y - d.y).abs() < 1e-9 && (t.z - d.z).abs() < 1e-9);
                    prop_assert!(crate::geometry::normalize_angle(t.yaw - d.yaw).abs() < 1e-9);
                }
            }
        }
    }

    fn fake_pings(n: usize, beams: usize) -> Vec<Ping> {
        (0..n)
            .map(|k| Ping {
                timestamp: k as f64,
                sensor_pose: Pose3::identity(),
                beams: (0..beams)
                    .map(|b| {
                        let a = -1.0 + 2.0 * b as f64 / beams as f64;
                        Point3::new(0.0, 20.0 * a.sin(), 20.0 * a.cos())
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn noise_free_is_identity() {
        let p = fake_pings(5, 10);
        assert_eq!(add_beam_noise(&p, 0.0, 0.0, 3).unwrap(), p);
        assert!(add_beam_noise(&p, -1.0, 0.0, 3).is_err());
        assert!(add_beam_noise(&p, 0.1, 1.0, 3).is_err());
    }

    #[test]
    fn outlier_count_is_binomial() {
        let clean = fake_pings(1000, 100);
        let (_, labels) = add_beam_noise_labeled(&clean, 0.05, 0.01, 17).unwrap();
        let count = labels.iter().flatten().filter(|&&o| o).count() as f64;
        let n: f64 = 1e5;
        let expected = n * 0.01;
        let sd = (n * 0.01 * 0.99).sqrt();
        assert!((count - expected).abs() <= 3.0 * sd, "outliers {count}");
    }

    #[test]
    fn outliers_are_displaced_far() {
        let clean = fake_pings(200, 50);
        let (noisy, labels) = add_beam_noise_labeled(&clean, 0.1, 0.05, 2).unwrap();
        for ((c, n), l) in clean.iter().zip(&noisy).zip(&labels) {
            for ((a, b), &o) in c.beams.iter().zip(&n.beams).zip(l) {
                if o {
                    assert!((a - b).norm() >= outlier_offset_floor(0.1) - 1e-9);
                }
            }
        }
    }

    #[test]
    fn range_jitter_has_requested_std() {
        let clean = fake_pings(200, 100);
        let noisy = add_beam_noise(&clean, 0.1, 0.0, 5).unwrap();
        let res: Vec<f64> = clean
            .iter()
            .zip(&noisy)
            .flat_map(|(c, n)| c.beams.iter().zip(&n.beams).map(|(a, b)| b.coords.norm() - a.coords.norm()))
            .collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let std = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64).sqrt();
        assert!((std - 0.1).abs() < 0.01, "std {std}");
    }
}
