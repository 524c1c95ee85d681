//! Aggregation of consecutive pings into rigid submaps, and their conditioning.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Matrix3, Point3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose3;
use crate::kdtree::KdTree;
use crate::measurement::{Ping, Submap};

/// Minimum points for a feature cell to contribute a score.
const MIN_CELL_POINTS: usize = 10;

/// Minimum points accepted by [`feature_score`].
pub const MIN_SCORE_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubmapConfig {
    /// Along-track distance after which a submap is closed, meters.
    pub max_length: f64,
    /// Accumulated feature score that closes a submap early.
    pub info_threshold: f64,
    /// Edge of the square cells the feature score is evaluated on, meters.
    pub feature_cell: f64,
    pub voxel_size: f64,
    pub outlier_neighbors: usize,
    pub outlier_std_mult: f64,
}

impl Default for SubmapConfig {
    fn default() -> Self {
        Self {
            max_length: 50.0,
            info_threshold: 2.0,
            feature_cell: 5.0,
            voxel_size: 0.5,
            outlier_neighbors: 10,
            outlier_std_mult: 2.0,
        }
    }
}

impl SubmapConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("max_length", self.max_length),
            ("info_threshold", self.info_threshold),
            ("feature_cell", self.feature_cell),
            ("voxel_size", self.voxel_size),
            ("outlier_std_mult", self.outlier_std_mult),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("submap.{name} must be positive (got {v})")));
            }
        }
        if self.outlier_neighbors == 0 {
            return Err(Error::Config("submap.outlier_neighbors must be positive".into()));
        }
        if self.voxel_size >= self.max_length {
            return Err(Error::Config("submap.voxel_size must be smaller than submap.max_length".into()));
        }
        Ok(())
    }
}

/// Unitless measure of 3D structure; zero on planar sets.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FeatureScore(pub f64);

#[derive(Debug, Clone, Default)]
struct CovAccum {
    n: usize,
    sum: Vector3<f64>,
    sum_outer: Matrix3<f64>,
}

impl CovAccum {
    fn add(&mut self, p: &Vector3<f64>) {
        self.n += 1;
        self.sum += p;
        self.sum_outer += p * p.transpose();
    }

    /// `lambda_min / lambda_max` of the sample covariance.
    fn ratio(&self) -> Option<f64> {
        if self.n < MIN_CELL_POINTS {
            return None;
        }
        let n = self.n as f64;
        let mean = self.sum / n;
        let cov = self.sum_outer / n - mean * mean.transpose();
        let eig = SymmetricEigen::new(cov).eigenvalues;
        let max = eig.max();
        if !(max > 0.0) {
            return Some(0.0);
        }
        Some((eig.min() / max).clamp(0.0, 1.0))
    }
}

/// Per-cell covariance statistics over a square x-y grid.
#[derive(Debug, Clone)]
struct FeatureGrid {
    cell: f64,
    origin: Vector3<f64>,
    cells: BTreeMap<(i64, i64), CovAccum>,
    ratios: BTreeMap<(i64, i64), f64>,
    total: f64,
}

impl FeatureGrid {
    fn new(cell: f64, origin: Vector3<f64>) -> Self {
        Self {
            cell,
            origin,
            cells: BTreeMap::new(),
            ratios: BTreeMap::new(),
            total: 0.0,
        }
    }

    fn key(&self, p: &Vector3<f64>) -> (i64, i64) {
        let d = p - self.origin;
        ((d.x / self.cell).floor() as i64, (d.y / self.cell).floor() as i64)
    }

    fn add_points<'a>(&mut self, points: impl IntoIterator<Item = &'a Point3<f64>>) {
        let mut touched = Vec::new();
        for p in points {
            let key = self.key(&p.coords);
            self.cells.entry(key).or_default().add(&(p.coords - self.origin));
            touched.push(key);
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let old = self.ratios.remove(&key).unwrap_or(0.0);
            let new = self.cells[&key].ratio();
            self.total -= old;
            if let Some(r) = new {
                self.total += r;
                self.ratios.insert(key, r);
            }
        }
    }

    fn weighted_mean(&self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (key, r) in &self.ratios {
            let n = self.cells[key].n as f64;
            num += n * r;
            den += n;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    }
}

/// Mean `lambda3 / lambda1` covariance ratio over `cell`-sized x-y cells
/// centred on the centroid, weighted by cell population.
pub fn feature_score(points: &[Point3<f64>], cell: f64) -> Result<FeatureScore> {
    if points.len() < MIN_SCORE_POINTS {
        return Err(Error::TooFewPoints {
            got: points.len(),
            need: MIN_SCORE_POINTS,
        });
    }
    let centroid = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / points.len() as f64;
    let origin = centroid - Vector3::new(cell / 2.0, cell / 2.0, 0.0);
    let mut grid = FeatureGrid::new(cell, origin);
    grid.add_points(points);
    Ok(FeatureScore(grid.weighted_mean()))
}

/// Splits the ping stream into submaps.
///
/// A submap closes after the ping at which either the accumulated feature
/// score (sum of per-cell ratios, evaluated in the frame of the submap's first
/// ping) reaches `info_threshold` or the along-track distance reaches
/// `max_length`. The anchor is the DR pose of the middle ping and the returned
/// points are the unfiltered beams re-expressed in the anchor frame.
pub fn build_submaps(pings: &[Ping], dr_poses: &[Pose3], cfg: &SubmapConfig) -> Result<Vec<Submap>> {
    if pings.len() != dr_poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} pings but {} dead-reckoning poses",
            pings.len(),
            dr_poses.len()
        )));
    }
    let mut submaps = Vec::new();
    let mut start = 0;
    while start < pings.len() {
        let end = find_submap_end(pings, dr_poses, start, cfg);
        submaps.push(assemble(submaps.len(), pings, dr_poses, start, end));
        start = end + 1;
    }
    Ok(submaps)
}

/// Index of the last ping of the submap that begins at `start`.
fn find_submap_end(pings: &[Ping], dr_poses: &[Pose3], start: usize, cfg: &SubmapConfig) -> usize {
    let local_frame = dr_poses[start].inverse();
    // the first ping's beams lie on local x = 0; keep that line off a cell edge
    let half = cfg.feature_cell / 2.0;
    let mut grid = FeatureGrid::new(cfg.feature_cell, Vector3::new(-half, -half, 0.0));
    let mut travelled = 0.0;
    for k in start..pings.len() {
        if k > start {
            let (a, b) = (&dr_poses[k - 1], &dr_poses[k]);
            travelled += ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        }
        let to_local = local_frame.compose(&dr_poses[k]);
        let local: Vec<Point3<f64>> = pings[k].beams.iter().map(|b| to_local.transform_point(b)).collect();
        grid.add_points(&local);
        // tolerance keeps ties stable under rigid re-posing of the interval
        if grid.total >= cfg.info_threshold || travelled >= cfg.max_length * (1.0 - 1e-9) {
            return k;
        }
    }
    pings.len() - 1
}

fn assemble(id: usize, pings: &[Ping], dr_poses: &[Pose3], first: usize, last: usize) -> Submap {
    let anchor = dr_poses[(first + last) / 2];
    let mut points = Vec::new();
    for k in first..=last {
        let rel = anchor.relative(&dr_poses[k]);
        points.extend(pings[k].beams.iter().map(|b| rel.transform_point(b)));
    }
    Submap::new(id, anchor, points, first..last + 1)
}

/// One centroid per occupied voxel, in voxel-key order.
pub fn voxel_downsample(points: &[Point3<f64>], voxel_size: f64) -> Vec<Point3<f64>> {
    assert!(voxel_size > 0.0, "voxel_size must be positive");
    let mut voxels: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in points {
        let key = (
            (p.x / voxel_size).floor() as i64,
            (p.y / voxel_size).floor() as i64,
            (p.z / voxel_size).floor() as i64,
        );
        let entry = voxels.entry(key).or_insert((Vector3::zeros(), 0));
        entry.0 += p.coords;
        entry.1 += 1;
    }
    voxels
        .into_values()
        .map(|(sum, n)| Point3::from(sum / n as f64))
        .collect()
}

/// Keep-mask of the statistical outlier filter.
///
/// A point is dropped when the mean distance to its `neighbors` nearest
/// neighbours exceeds `mean + std_mult * std` of that statistic over the
/// cloud, and also exceeds twice the cloud mean, so regular lattices keep
/// their border points.
pub fn outlier_mask(points: &[Point3<f64>], neighbors: usize, std_mult: f64) -> Vec<bool> {
    if points.len() <= neighbors || neighbors == 0 {
        warn!(
            "outlier removal skipped: {} points with {} neighbours",
            points.len(),
            neighbors
        );
        return vec![true; points.len()];
    }
    let tree = KdTree::new(points.iter().map(|p| [p.x, p.y, p.z]).collect());
    let mean_dist: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let found = tree.nearest_k(&[p.x, p.y, p.z], neighbors + 1);
            let mut skipped_self = false;
            let mut total = 0.0;
            let mut count = 0;
            for n in found {
                if !skipped_self && n.index == i {
                    skipped_self = true;
                    continue;
                }
                if count == neighbors {
                    break;
                }
                total += n.dist_sq.sqrt();
                count += 1;
            }
            total / count as f64
        })
        .collect();
    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let sigma = (mean_dist.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n).sqrt();
    let threshold = (mu + std_mult * sigma).max(2.0 * mu);
    mean_dist.iter().map(|&d| d <= threshold).collect()
}

pub fn remove_outliers(points: &[Point3<f64>], neighbors: usize, std_mult: f64) -> Vec<Point3<f64>> {
    let mask = outlier_mask(points, neighbors, std_mult);
    points
        .iter()
        .zip(mask)
        .filter_map(|(p, keep)| keep.then_some(*p))
        .collect()
}

/// Voxel downsampling followed by outlier removal, in the anchor frame.
pub fn condition_submap(submap: &Submap, cfg: &SubmapConfig) -> Submap {
    let down = voxel_downsample(&submap.points, cfg.voxel_size);
    let kept = remove_outliers(&down, cfg.outlier_neighbors, cfg.outlier_std_mult);
    submap.with_points(if kept.is_empty() { down } else { kept })
}
