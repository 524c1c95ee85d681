//! Overlap detection and plane-to-plane GICP restricted to `(x, y, yaw)`.
//!
//! Clouds are handled in "levelled" frames: each submap's roll, pitch and
//! depth are applied up front, so the only free parameters left are the
//! planar translation and heading. Per-point covariances follow the
//! plane-regularised GICP model: the local neighbourhood's eigenvalues are
//! replaced by `(1, 1, plane_epsilon)` in its own eigenbasis.

use nalgebra::{Matrix2, Matrix3, Point3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Rect};
use crate::kdtree::KdTree;
use crate::measurement::{GaussianRelativePose, Submap};

/// Smallest eigenvalue allowed in an estimated information matrix.
pub const INFORMATION_FLOOR: f64 = 1e-6;

/// Fewest correspondences for a registration step to be trusted.
const MIN_CORRESPONDENCES: usize = 12;

/// Source points required inside the target footprint to keep a candidate.
const MIN_OVERLAP_POINTS: usize = 20;

const MAX_STEP_HALVINGS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapCandidate {
    pub source_id: usize,
    pub target_id: usize,
    /// Rectangle intersection over the smaller footprint's area.
    pub overlap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GicpConfig {
    pub max_iterations: usize,
    pub correspondence_radius: f64,
    /// Widest correspondence gate of the coarse-to-fine schedule; the gate is
    /// halved per stage down to `correspondence_radius`.
    pub coarse_radius: f64,
    pub plane_epsilon: f64,
    pub convergence_tol: f64,
    pub min_overlap_fraction: f64,
    /// Neighbours used for the per-point surface covariances.
    pub covariance_neighbors: usize,
    /// Lower bound on the residual standard deviation used to scale the
    /// information estimate, meters.
    pub residual_floor: f64,
}

impl Default for GicpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 60,
            correspondence_radius: 1.0,
            coarse_radius: 8.0,
            plane_epsilon: 0.001,
            convergence_tol: 1e-4,
            min_overlap_fraction: 0.1,
            covariance_neighbors: 10,
            residual_floor: 0.05,
        }
    }
}

impl GicpConfig {
    /// Default settings with the correspondence radius tied to the voxel size.
    pub fn for_voxel_size(voxel_size: f64) -> Self {
        Self {
            correspondence_radius: 2.0 * voxel_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || self.covariance_neighbors < 3 {
            return Err(Error::Config(
                "gicp.max_iterations must be positive and gicp.covariance_neighbors >= 3".into(),
            ));
        }
        let pos = [
            ("correspondence_radius", self.correspondence_radius),
            ("coarse_radius", self.coarse_radius),
            ("convergence_tol", self.convergence_tol),
            ("min_overlap_fraction", self.min_overlap_fraction),
            ("residual_floor", self.residual_floor),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::Config(format!("gicp.{name} must be positive (got {v})")));
            }
        }
        if !(self.plane_epsilon > 0.0 && self.plane_epsilon < 1.0) {
            return Err(Error::Config("gicp.plane_epsilon must lie in (0, 1)".into()));
        }
        if self.min_overlap_fraction > 1.0 {
            return Err(Error::Config("gicp.min_overlap_fraction must be <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Pose of the source frame relative to the reference (first target) frame.
    pub transform: GaussianRelativePose,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub correspondences: usize,
    /// Cost after each accepted iteration, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// Pairs of non-consecutive submaps whose footprints overlap under `poses`.
///
/// The later submap is the source. Rectangle overlap is measured against the
/// smaller footprint and the candidate is kept only if enough of the
/// source's points actually fall inside the target rectangle.
pub fn detect_overlaps(submaps: &[Submap], poses: &[Pose2], min_fraction: f64) -> Vec<OverlapCandidate> {
    assert_eq!(submaps.len(), poses.len(), "one pose per submap");
    let world: Vec<Vec<Point3<f64>>> = submaps
        .iter()
        .zip(poses)
        .map(|(s, p)| s.world_points_at(p))
        .collect();
    let rects: Vec<Rect> = world
        .iter()
        .zip(poses)
        .map(|(pts, p)| Rect::from_points(pts).unwrap_or(Rect::new(p.x, p.y, p.x, p.y)))
        .collect();
    let mut out = Vec::new();
    for j in 0..submaps.len() {
        for i in 0..j.saturating_sub(1) {
            let Some(inter) = rects[i].intersection(&rects[j]) else {
                continue;
            };
            let smaller = rects[i].area().min(rects[j].area());
            let fraction = if smaller > 0.0 {
                (inter.area() / smaller).min(1.0)
            } else {
                0.0
            };
            if fraction < min_fraction {
                continue;
            }
            let inside = world[j].iter().filter(|p| rects[i].contains(p.x, p.y)).count();
            if inside < MIN_OVERLAP_POINTS.min(world[j].len()) {
                continue;
            }
            out.push(OverlapCandidate {
                source_id: submaps[j].id,
                target_id: submaps[i].id,
                overlap_fraction: fraction,
            });
        }
    }
    out
}

/// Points with their plane-regularised covariances and surface normals.
#[derive(Debug, Clone)]
pub struct SurfaceCloud {
    pub points: Vec<Point3<f64>>,
    pub covariances: Vec<Matrix3<f64>>,
    pub normals: Vec<Vector3<f64>>,
    tree: KdTree<3>,
}

impl SurfaceCloud {
    pub fn new(points: Vec<Point3<f64>>, neighbors: usize, plane_epsilon: f64) -> Self {
        let tree = KdTree::new(points.iter().map(|p| [p.x, p.y, p.z]).collect());
        let k = neighbors.min(points.len());
        let (covariances, normals) = points
            .iter()
            .map(|p| {
                let nn = tree.nearest_k(&[p.x, p.y, p.z], k);
                plane_covariance(nn.iter().map(|n| tree.point(n.index)), plane_epsilon)
            })
            .unzip();
        Self {
            points,
            covariances,
            normals,
            tree,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Regularised covariance `V diag(1, 1, eps) V^T` of a neighbourhood, and its
/// normal (the least-spread direction).
fn plane_covariance<'a>(neighbours: impl Iterator<Item = &'a [f64; 3]>, eps: f64) -> (Matrix3<f64>, Vector3<f64>) {
    let pts: Vec<Vector3<f64>> = neighbours.map(|p| Vector3::new(p[0], p[1], p[2])).collect();
    let fallback_normal = Vector3::z();
    if pts.len() < 3 {
        let c = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, eps));
        return (c, fallback_normal);
    }
    let n = pts.len() as f64;
    let mean = pts.iter().sum::<Vector3<f64>>() / n;
    let cov = pts
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let eig = SymmetricEigen::new(cov);
    let min_idx = eig.eigenvalues.imin();
    let mut normal: Vector3<f64> = eig.eigenvectors.column(min_idx).into();
    if normal.z < 0.0 {
        normal = -normal;
    }
    let c = Matrix3::identity() - (1.0 - eps) * normal * normal.transpose();
    (c, normal)
}

/// Rotation about z as a 3x3 matrix.
fn yaw_matrix(theta: f64) -> Matrix3<f64> {
    let (s, c) = theta.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

#[derive(Debug, Clone)]
struct Evaluation {
    /// `(source index, target index)` pairs.
    pairs: Vec<(usize, usize)>,
    cost: f64,
}

struct Problem<'a> {
    source: &'a SurfaceCloud,
    target: &'a SurfaceCloud,
    radius_sq: f64,
}

impl Problem<'_> {
    fn transformed(&self, t: &Pose2, i: usize) -> Point3<f64> {
        t.transform_point3(&self.source.points[i])
    }

    fn mahalanobis(&self, t: &Pose2, rot: &Matrix3<f64>, i: usize, j: usize) -> Option<(Vector3<f64>, Matrix3<f64>)> {
        let d = self.target.points[j] - self.transformed(t, i);
        let combined = self.target.covariances[j] + rot * self.source.covariances[i] * rot.transpose();
        combined.try_inverse().map(|m| (d, m))
    }

    fn evaluate(&self, t: &Pose2) -> Evaluation {
        let rot = yaw_matrix(t.theta);
        let mut pairs = Vec::new();
        let mut total = 0.0;
        for i in 0..self.source.len() {
            let q = self.transformed(t, i);
            let Some(nn) = self.target.tree.nearest_k_within(&[q.x, q.y, q.z], 1, self.radius_sq).into_iter().next() else {
                continue;
            };
            if let Some((d, m)) = self.mahalanobis(t, &rot, i, nn.index) {
                total += d.dot(&(m * d));
                pairs.push((i, nn.index));
            }
        }
        let cost = if pairs.is_empty() {
            f64::INFINITY
        } else {
            total / pairs.len() as f64
        };
        Evaluation { pairs, cost }
    }

    /// Gauss-Newton step over `(x, y, theta)` for fixed correspondences.
    fn step(&self, t: &Pose2, pairs: &[(usize, usize)]) -> Option<Vector3<f64>> {
        let rot = yaw_matrix(t.theta);
        let (s, c) = t.theta.sin_cos();
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for &(i, j) in pairs {
            let Some((d, m)) = self.mahalanobis(t, &rot, i, j) else {
                continue;
            };
            let a = &self.source.points[i];
            // derivative of the residual b - (R a + t) w.r.t. (x, y, theta)
            let jac = Matrix3::new(
                -1.0,
                0.0,
                s * a.x + c * a.y,
                0.0,
                -1.0,
                -(c * a.x - s * a.y),
                0.0,
                0.0,
                0.0,
            );
            let jt_m = jac.transpose() * m;
            h += jt_m * jac;
            g += jt_m * d;
        }
        let damping = 1e-9 * h.trace().max(1.0);
        let damped = h + Matrix3::identity() * damping;
        damped.cholesky().map(|ch| -ch.solve(&g))
    }
}

/// Diagnostics left over from a GICP run.
#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub transform: Pose2,
    pub converged: bool,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    /// Point-to-plane residuals (target normal) of the final correspondences.
    pub residuals: Vec<f64>,
}

/// Aligns `source` to `target`, returning the transform that maps source
/// coordinates into target coordinates.
///
/// Each iteration re-matches nearest neighbours within the correspondence
/// gate and takes a Gauss-Newton step on the plane-to-plane cost. A step is
/// accepted only if the cost at the new pose (with fresh matches) does not
/// increase; otherwise it is halved. Coarse stages with wider gates run first;
/// costs are reported at the final gate, where the accepted costs are
/// non-increasing and the final cost never exceeds the cost at `init`.
pub fn align_clouds(source: &SurfaceCloud, target: &SurfaceCloud, init: &Pose2, cfg: &GicpConfig) -> AlignmentOutcome {
    let mut pose = *init;
    let mut iterations = 0;
    // coarse stages widen the gate so multi-metre offsets still find matches
    for radius in coarse_radii(cfg) {
        let problem = Problem {
            source,
            target,
            radius_sq: radius * radius,
        };
        let stage = descend(&problem, pose, cfg);
        iterations += stage.iterations;
        pose = stage.pose;
    }
    let problem = Problem {
        source,
        target,
        radius_sq: cfg.correspondence_radius * cfg.correspondence_radius,
    };
    let at_init = problem.evaluate(init);
    let mut fine = descend(&problem, pose, cfg);
    iterations += fine.iterations;
    if !(fine.current.cost <= at_init.cost) {
        // the coarse stages led somewhere worse than the start; restart from it
        fine = descend(&problem, *init, cfg);
        iterations += fine.iterations;
    }
    let mut history = vec![at_init.cost];
    history.extend(fine.history);
    let pose = fine.pose;
    let current = fine.current;
    let residuals = current
        .pairs
        .iter()
        .map(|&(i, j)| {
            let d = target.points[j] - pose.transform_point3(&source.points[i]);
            target.normals[j].dot(&d)
        })
        .collect();
    AlignmentOutcome {
        transform: pose,
        converged: fine.converged && current.pairs.len() >= MIN_CORRESPONDENCES,
        initial_cost: at_init.cost,
        final_cost: current.cost,
        iterations,
        cost_history: history,
        residuals,
    }
}

/// Gate radii for the coarse stages, widest first, excluding the final one.
fn coarse_radii(cfg: &GicpConfig) -> Vec<f64> {
    let mut radii = Vec::new();
    let mut r = cfg.coarse_radius;
    while r > cfg.correspondence_radius * 1.5 {
        radii.push(r);
        r *= 0.5;
    }
    radii
}

struct Descent {
    pose: Pose2,
    current: Evaluation,
    history: Vec<f64>,
    converged: bool,
    iterations: usize,
}

/// Damped Gauss-Newton with step halving; accepted costs never increase.
fn descend(problem: &Problem<'_>, start: Pose2, cfg: &GicpConfig) -> Descent {
    let mut pose = start;
    let mut current = problem.evaluate(&pose);
    let mut history = vec![current.cost];
    let mut converged = false;
    let mut iterations = 0;
    if current.pairs.len() >= MIN_CORRESPONDENCES {
        while iterations < cfg.max_iterations {
            iterations += 1;
            let Some(delta) = problem.step(&pose, &current.pairs) else {
                break;
            };
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_STEP_HALVINGS {
                let candidate = Pose2::new(
                    pose.x + scale * delta.x,
                    pose.y + scale * delta.y,
                    pose.theta + scale * delta.z,
                );
                let eval = problem.evaluate(&candidate);
                if eval.pairs.len() >= MIN_CORRESPONDENCES && eval.cost <= current.cost {
                    accepted = Some((candidate, eval));
                    break;
                }
                scale *= 0.5;
            }
            let Some((next, eval)) = accepted else {
                // no descent direction left: stationary point
                converged = true;
                break;
            };
            let moved = ((next.x - pose.x).powi(2) + (next.y - pose.y).powi(2)).sqrt();
            let turned = crate::geometry::normalize_angle(next.theta - pose.theta).abs();
            pose = next;
            current = eval;
            history.push(current.cost);
            if moved < cfg.convergence_tol && turned < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    Descent {
        pose,
        current,
        history,
        converged,
        iterations,
    }
}

/// Registers `source` against the rigid union of `targets`.
///
/// Target anchors are taken as placed (the caller sets them to the current
/// estimate). The returned mean is the source anchor's planar pose relative
/// to the first target's planar pose; `init` is the initial guess of it.
pub fn gicp_register(source: &Submap, targets: &[Submap], init: &Pose2, cfg: &GicpConfig) -> RegistrationResult {
    let reference = targets
        .first()
        .map(|t| t.anchor.project_se2())
        .unwrap_or(Pose2::identity());
    let to_ref = reference.inverse();
    let target_points: Vec<Point3<f64>> = targets
        .iter()
        .flat_map(|t| {
            let planar = to_ref.compose(&t.anchor.project_se2());
            t.levelled_points()
                .into_iter()
                .map(move |p| planar.transform_point3(&p))
        })
        .collect();
    let source_points = source.levelled_points();
    register_points(source_points, target_points, init, cfg)
}

/// GICP plus information estimate on raw point sets (already levelled).
pub fn register_points(
    source_points: Vec<Point3<f64>>,
    target_points: Vec<Point3<f64>>,
    init: &Pose2,
    cfg: &GicpConfig,
) -> RegistrationResult {
    let floor = Matrix3::identity() * INFORMATION_FLOOR;
    if source_points.len() < MIN_CORRESPONDENCES || target_points.len() < MIN_CORRESPONDENCES {
        return RegistrationResult {
            transform: GaussianRelativePose { mean: *init, information: floor },
            converged: false,
            initial_cost: f64::INFINITY,
            final_cost: f64::INFINITY,
            iterations: 0,
            correspondences: 0,
            cost_history: Vec::new(),
        };
    }
    let source = SurfaceCloud::new(source_points, cfg.covariance_neighbors, cfg.plane_epsilon);
    let target = SurfaceCloud::new(target_points, cfg.covariance_neighbors, cfg.plane_epsilon);
    let outcome = align_clouds(&source, &target, init, cfg);
    let information = if outcome.converged {
        estimate_information(&source.points, &outcome.residuals, cfg.residual_floor)
    } else {
        floor
    };
    RegistrationResult {
        transform: GaussianRelativePose {
            mean: outcome.transform,
            information,
        },
        converged: outcome.converged,
        initial_cost: outcome.initial_cost,
        final_cost: outcome.final_cost,
        iterations: outcome.iterations,
        correspondences: outcome.residuals.len(),
        cost_history: outcome.cost_history,
    }
}

/// Minimum points for a cell to contribute to the information estimate.
const INFO_CELL_POINTS: usize = 6;

/// Cell edge in whitened (unit-variance) coordinates.
const INFO_CELL: f64 = 0.5;

/// Smallest accepted in-cell coordinate variance: a quarter of that of
/// points spread uniformly over the cell.
const MIN_CELL_SPREAD: f64 = 0.25 * INFO_CELL * INFO_CELL / 12.0;

/// Information heuristic from the normalised covariance of the source returns.
///
/// The horizontal coordinates are whitened (centred, rotated onto their
/// principal axes and scaled to unit variance), so the estimate does not
/// depend on the x-y scale of the submap. On a grid of whitened cells a local
/// plane `z = c + b . u` is fitted; `b` says how strongly depth constrains a
/// shift along each principal axis and `b` projected on the cell's rotational
/// direction says how strongly it constrains heading. The population-weighted
/// mean outer product of these sensitivities, divided by the residual
/// variance (floored at `residual_floor^2`), is the information. Flat
/// submaps give zero sensitivity and end at the floor eigenvalue.
pub fn estimate_information(points: &[Point3<f64>], residuals: &[f64], residual_floor: f64) -> Matrix3<f64> {
    let floor = Matrix3::identity() * INFORMATION_FLOOR;
    if points.len() < INFO_CELL_POINTS {
        return floor;
    }
    let n = points.len() as f64;
    let mean_xy = points.iter().map(|p| Vector2::new(p.x, p.y)).sum::<Vector2<f64>>() / n;
    let cov_xy = points
        .iter()
        .map(|p| {
            let d = Vector2::new(p.x, p.y) - mean_xy;
            d * d.transpose()
        })
        .sum::<Matrix2<f64>>()
        / n;
    let eig = SymmetricEigen::new(cov_xy);
    let axes = eig.eigenvectors;
    let spread = eig.eigenvalues;
    if spread.min() <= 1e-12 * spread.max().max(1e-300) {
        return floor;
    }
    let sqrt_spread = spread.map(f64::sqrt);
    let whiten = |p: &Point3<f64>| -> Vector2<f64> {
        let d = axes.transpose() * (Vector2::new(p.x, p.y) - mean_xy);
        Vector2::new(d.x / sqrt_spread.x, d.y / sqrt_spread.y)
    };

    #[derive(Default)]
    struct Cell {
        n: usize,
        su: Vector2<f64>,
        sz: f64,
        suu: Matrix2<f64>,
        suz: Vector2<f64>,
    }
    let mut cells: std::collections::BTreeMap<(i64, i64), Cell> = Default::default();
    for p in points {
        let u = whiten(p);
        let key = ((u.x / INFO_CELL).floor() as i64, (u.y / INFO_CELL).floor() as i64);
        let c = cells.entry(key).or_default();
        c.n += 1;
        c.su += u;
        c.sz += p.z;
        c.suu += u * u.transpose();
        c.suz += u * p.z;
    }

    let mut acc = Matrix3::zeros();
    let mut weight = 0.0;
    for c in cells.values() {
        if c.n < INFO_CELL_POINTS {
            continue;
        }
        let m = c.n as f64;
        let u_bar = c.su / m;
        let z_bar = c.sz / m;
        let cuu = c.suu / m - u_bar * u_bar.transpose();
        let cuz = c.suz / m - u_bar * z_bar;
        // a cell whose points lie along a line (one scan line, a swath
        // edge) cannot fix a slope across it
        if SymmetricEigen::new(cuu).eigenvalues.min() < MIN_CELL_SPREAD {
            continue;
        }
        let Some(inv) = cuu.try_inverse() else {
            continue;
        };
        // depth change per whitened unit along each principal axis
        let b = inv * cuz;
        let along_axes = axes * b;
        // heading sensitivity: gradient in x-y dotted with the rotation field
        let grad_xy = axes * Vector2::new(b.x / sqrt_spread.x, b.y / sqrt_spread.y);
        let centre = axes * Vector2::new(u_bar.x * sqrt_spread.x, u_bar.y * sqrt_spread.y);
        let swirl = Vector2::new(-centre.y, centre.x);
        let g = Vector3::new(along_axes.x, along_axes.y, grad_xy.dot(&swirl));
        acc += m * g * g.transpose();
        weight += m;
    }
    if weight == 0.0 {
        return floor;
    }
    let resid_var = if residuals.is_empty() {
        0.0
    } else {
        residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64
    };
    let scale = resid_var.max(residual_floor * residual_floor);
    floor_information(&(acc / (weight * scale)))
}

/// Symmetrises and clamps eigenvalues to at least [`INFORMATION_FLOOR`].
pub fn floor_information(m: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|l| l.max(INFORMATION_FLOOR));
    let out = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}
