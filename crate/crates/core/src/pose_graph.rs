//! Planar pose graph over submap frames, solved by Levenberg-Marquardt.
//!
//! Nodes are the `(x, y, theta)` components of the submap anchors. Edges are
//! dead-reckoning links between consecutive submaps and loop closures from
//! registration. The objective is the sum of `e^T Omega e / 2` over edges, with
//! the residual `e = z - relative(x_i, x_j)` expressed in the frame of `x_i`
//! and its angle wrapped.

use std::collections::VecDeque;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, rotation2, Pose2};
use crate::measurement::{check_information, GaussianRelativePose, Submap};
use crate::registration::RegistrationResult;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Dr,
    Lc,
}

impl EdgeKind {
    fn tag(self) -> &'static str {
        match self {
            EdgeKind::Dr => "EDGE_DR",
            EdgeKind::Lc => "EDGE_LC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub state: Pose2,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub kind: EdgeKind,
    pub measurement: GaussianRelativePose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    /// Stop when the gradient norm, the step norm or the relative cost
    /// decrease falls below this.
    pub tolerance: f64,
    /// Damping increases tried when the normal equations cannot be factored.
    pub max_retries: usize,
    /// Huber threshold on the whitened residual norm; `None` is plain least squares.
    pub huber_delta: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            lambda_init: 1e-4,
            tolerance: 1e-10,
            max_retries: 10,
            huber_delta: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("solver.max_iterations must be positive".into()));
        }
        if !(self.lambda_init > 0.0) || !(self.tolerance > 0.0) {
            return Err(Error::Config("solver.lambda_init and solver.tolerance must be positive".into()));
        }
        if let Some(d) = self.huber_delta {
            if !(d > 0.0) {
                return Err(Error::Config(format!("solver.huber_delta must be positive (got {d})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

/// Residual `z - relative(x_i, x_j)` in the frame of `x_i`, angle wrapped.
pub fn residual(z: &Pose2, xi: &Pose2, xj: &Pose2) -> Vector3<f64> {
    let rel = xi.relative(xj);
    Vector3::new(z.x - rel.x, z.y - rel.y, normalize_angle(z.theta - rel.theta))
}

/// Derivatives of [`residual`] with respect to `x_i` and `x_j`.
pub fn residual_jacobians(xi: &Pose2, xj: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
    let rt = rotation2(xi.theta).transpose();
    let (s, c) = xi.theta.sin_cos();
    let dt = xj.translation() - xi.translation();
    // derivative of R(theta)^T applied to dt
    let drt = Matrix2::new(-s, c, -c, -s) * dt;
    let mut ji = Matrix3::zeros();
    ji.fixed_view_mut::<2, 2>(0, 0).copy_from(&rt);
    ji.fixed_view_mut::<2, 1>(0, 2).copy_from(&(-drt));
    ji[(2, 2)] = 1.0;
    let mut jj = Matrix3::zeros();
    jj.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-rt));
    jj[(2, 2)] = -1.0;
    (ji, jj)
}

/// `e^T Omega e / 2`.
pub fn edge_cost(edge: &GraphEdge, xi: &Pose2, xj: &Pose2) -> f64 {
    let e = residual(&edge.measurement.mean, xi, xj);
    0.5 * e.dot(&(edge.measurement.information * e))
}

/// Weight and cost for a whitened squared residual under an optional Huber kernel.
fn robust(sq: f64, huber: Option<f64>) -> (f64, f64) {
    match huber {
        Some(d) if sq > d * d => {
            let r = sq.sqrt();
            (d / r, d * r - 0.5 * d * d)
        }
        _ => (1.0, 0.5 * sq),
    }
}

/// DR edge covariance: per-submap drift variances scaled by the along-track
/// length of the interval relative to the nominal submap length.
pub fn dr_information(sigma_xy: f64, sigma_theta: f64, interval: f64, nominal: f64) -> Result<Matrix3<f64>> {
    let scale = if nominal > 0.0 { (interval / nominal).max(1e-3) } else { 1.0 };
    let var_xy = sigma_xy * sigma_xy * scale;
    let var_t = sigma_theta * sigma_theta * scale;
    if !(var_xy > 0.0 && var_t > 0.0) {
        return Err(Error::InvalidInput(
            "DR information needs positive drift sigmas".into(),
        ));
    }
    Ok(Matrix3::from_diagonal(&Vector3::new(1.0 / var_xy, 1.0 / var_xy, 1.0 / var_t)))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl PoseGraph {
    /// Graph with one node per state, ids `0..n`, node 0 fixed.
    pub fn new(states: &[Pose2]) -> Self {
        let nodes = states
            .iter()
            .enumerate()
            .map(|(id, &state)| GraphNode { id, state, fixed: id == 0 })
            .collect();
        Self { nodes, edges: Vec::new() }
    }

    pub fn states(&self) -> Vec<Pose2> {
        self.nodes.iter().map(|n| n.state).collect()
    }

    fn check_node(&self, id: usize) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Graph(format!("node {id} does not exist ({} nodes)", self.nodes.len())));
        }
        Ok(())
    }

    pub fn add_dr_edge(&mut self, i: usize, measurement: GaussianRelativePose) -> Result<()> {
        self.check_node(i)?;
        self.check_node(i + 1)?;
        check_information(&measurement.information)?;
        if self
            .edges
            .iter()
            .any(|e| e.kind == EdgeKind::Dr && e.i == i)
        {
            return Err(Error::Graph(format!("duplicate DR edge {i} -> {}", i + 1)));
        }
        self.edges.push(GraphEdge { i, j: i + 1, kind: EdgeKind::Dr, measurement });
        Ok(())
    }

    pub fn add_lc_edge(&mut self, i: usize, j: usize, reg: &RegistrationResult) -> Result<()> {
        if !reg.converged {
            return Err(Error::Graph(format!("registration {i} -> {j} did not converge")));
        }
        self.add_lc_measurement(i, j, reg.transform)
    }

    /// Loop closure from an already accepted measurement.
    pub fn add_lc_measurement(&mut self, i: usize, j: usize, measurement: GaussianRelativePose) -> Result<()> {
        self.check_node(i)?;
        self.check_node(j)?;
        if i == j || i + 1 == j || j + 1 == i {
            return Err(Error::Graph(format!("loop closure {i} -> {j} must join non-consecutive nodes")));
        }
        check_information(&measurement.information)?;
        self.edges.push(GraphEdge { i, j, kind: EdgeKind::Lc, measurement });
        Ok(())
    }

    pub fn count(&self, kind: EdgeKind) -> usize {
        self.edges.iter().filter(|e| e.kind == kind).count()
    }

    pub fn total_cost(&self) -> f64 {
        self.cost_at(&self.states(), None)
    }

    fn cost_at(&self, states: &[Pose2], huber: Option<f64>) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = residual(&e.measurement.mean, &states[e.i], &states[e.j]);
                robust(r.dot(&(e.measurement.information * r)), huber).1
            })
            .sum()
    }

    /// Connected components of the node set, each sorted, ordered by first id.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut adj = vec![Vec::new(); n];
        for e in &self.edges {
            adj[e.i].push(e.j);
            adj[e.j].push(e.i);
        }
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            seen[start] = true;
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                        queue.push_back(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    /// Levenberg-Marquardt on the total cost; states are updated in place.
    pub fn optimize(&mut self, cfg: &SolverConfig) -> Result<SolverReport> {
        cfg.validate()?;
        let components = self.components();
        if components.len() > 1 {
            return Err(Error::Disconnected { components });
        }
        if !self.nodes.iter().any(|n| n.fixed) {
            return Err(Error::Graph("no fixed node".into()));
        }
        // column offset of each free node
        let mut slot = vec![None; self.nodes.len()];
        let mut free = 0;
        for (k, n) in self.nodes.iter().enumerate() {
            if !n.fixed {
                slot[k] = Some(3 * free);
                free += 1;
            }
        }
        let dim = 3 * free;
        let mut states = self.states();
        let mut cost = self.cost_at(&states, cfg.huber_delta);
        let initial_cost = cost;
        let mut lambda = cfg.lambda_init;
        let mut iterations = 0;
        let mut converged = dim == 0;
        let mut gradient_norm = 0.0;

        while !converged && iterations < cfg.max_iterations {
            iterations += 1;
            let (h, g) = self.linearize(&states, &slot, dim, cfg.huber_delta);
            gradient_norm = g.amax();
            if gradient_norm < cfg.tolerance {
                converged = true;
                break;
            }
            let mut retries = 0;
            let step = loop {
                match solve_damped(&h, &g, lambda, dim) {
                    Some(step) => break step,
                    None if retries < cfg.max_retries => {
                        retries += 1;
                        lambda *= 10.0;
                    }
                    None => return Err(Error::Singular { retries }),
                }
            };
            let candidate: Vec<Pose2> = states
                .iter()
                .zip(&slot)
                .map(|(s, k)| match k {
                    Some(k) => Pose2::new(s.x + step[*k], s.y + step[k + 1], s.theta + step[k + 2]),
                    None => *s,
                })
                .collect();
            let new_cost = self.cost_at(&candidate, cfg.huber_delta);
            if new_cost <= cost {
                let decrease = cost - new_cost;
                states = candidate;
                lambda = (lambda / 10.0).max(1e-12);
                let small_step = step.amax() < cfg.tolerance;
                let small_decrease = decrease <= cfg.tolerance * cost.max(1e-300);
                cost = new_cost;
                if small_step || small_decrease {
                    converged = true;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    // no descent possible at any damping: stationary to precision
                    converged = true;
                }
            }
        }
        for (n, s) in self.nodes.iter_mut().zip(&states) {
            n.state = *s;
        }
        if converged {
            let (_, g) = self.linearize(&states, &slot, dim, cfg.huber_delta);
            gradient_norm = if dim == 0 { 0.0 } else { g.amax() };
        }
        Ok(SolverReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
            gradient_norm,
        })
    }

    /// Gauss-Newton Hessian (sparse, upper and lower) and gradient.
    fn linearize(&self, states: &[Pose2], slot: &[Option<usize>], dim: usize, huber: Option<f64>) -> (CscMatrix<f64>, DVector<f64>) {
        let mut coo = CooMatrix::new(dim, dim);
        let mut g = DVector::zeros(dim);
        for e in &self.edges {
            let (xi, xj) = (&states[e.i], &states[e.j]);
            let r = residual(&e.measurement.mean, xi, xj);
            let omega = e.measurement.information;
            let (w, _) = robust(r.dot(&(omega * r)), huber);
            let omega = omega * w;
            let (ji, jj) = residual_jacobians(xi, xj);
            let blocks = [(slot[e.i], ji), (slot[e.j], jj)];
            for (a, ja) in &blocks {
                let Some(a) = a else { continue };
                let ga = ja.transpose() * omega * r;
                for k in 0..3 {
                    g[a + k] += ga[k];
                }
                for (b, jb) in &blocks {
                    let Some(b) = b else { continue };
                    let hab = ja.transpose() * omega * jb;
                    for r in 0..3 {
                        for c in 0..3 {
                            coo.push(a + r, b + c, hab[(r, c)]);
                        }
                    }
                }
            }
        }
        (CscMatrix::from(&coo), g)
    }

    pub fn set_states(&mut self, states: &[Pose2]) -> Result<()> {
        if states.len() != self.nodes.len() {
            return Err(Error::InvalidInput(format!(
                "{} states for {} nodes",
                states.len(),
                self.nodes.len()
            )));
        }
        for (n, s) in self.nodes.iter_mut().zip(states) {
            n.state = *s;
        }
        Ok(())
    }

    /// Text export: `VERTEX_SE2 id x y theta`, `FIX id`, and
    /// `EDGE_DR|EDGE_LC i j zx zy ztheta` followed by the upper triangle of
    /// the information matrix, row by row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            let _ = writeln!(out, "VERTEX_SE2 {} {:.17e} {:.17e} {:.17e}", n.id, n.state.x, n.state.y, n.state.theta);
        }
        for n in self.nodes.iter().filter(|n| n.fixed) {
            let _ = writeln!(out, "FIX {}", n.id);
        }
        for e in &self.edges {
            let z = e.measurement.mean;
            let o = e.measurement.information;
            let _ = write!(out, "{} {} {} {:.17e} {:.17e} {:.17e}", e.kind.tag(), e.i, e.j, z.x, z.y, z.theta);
            for r in 0..3 {
                for c in r..3 {
                    let _ = write!(out, " {:.17e}", o[(r, c)]);
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::InvalidInput(format!("pose graph line {line}: {detail}"));
        let mut graph = PoseGraph::default();
        let mut fixed = Vec::new();
        for (ln, line) in text.lines().enumerate().map(|(k, l)| (k + 1, l.trim())) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |k: usize| -> Result<f64> {
                fields
                    .get(k)
                    .ok_or_else(|| bad(ln, "missing field".into()))?
                    .parse::<f64>()
                    .map_err(|e| bad(ln, e.to_string()))
            };
            let id = |k: usize| -> Result<usize> {
                fields
                    .get(k)
                    .ok_or_else(|| bad(ln, "missing field".into()))?
                    .parse::<usize>()
                    .map_err(|e| bad(ln, e.to_string()))
            };
            match fields[0] {
                "VERTEX_SE2" => {
                    let n = id(1)?;
                    if n != graph.nodes.len() {
                        return Err(bad(ln, format!("vertex ids must be consecutive from 0, got {n}")));
                    }
                    graph.nodes.push(GraphNode { id: n, state: Pose2::new(num(2)?, num(3)?, num(4)?), fixed: false });
                }
                "FIX" => fixed.push(id(1)?),
                tag @ ("EDGE_DR" | "EDGE_LC") => {
                    if fields.len() != 12 {
                        return Err(bad(ln, format!("expected 12 fields, got {}", fields.len())));
                    }
                    let (i, j) = (id(1)?, id(2)?);
                    let z = Pose2::new(num(3)?, num(4)?, num(5)?);
                    let mut o = Matrix3::zeros();
                    let mut k = 6;
                    for r in 0..3 {
                        for c in r..3 {
                            o[(r, c)] = num(k)?;
                            o[(c, r)] = o[(r, c)];
                            k += 1;
                        }
                    }
                    let m = GaussianRelativePose::new(z, o).map_err(|e| bad(ln, e.to_string()))?;
                    if tag == "EDGE_DR" {
                        if j != i + 1 {
                            return Err(bad(ln, format!("DR edge must join {i} and {}", i + 1)));
                        }
                        graph.add_dr_edge(i, m)
                    } else {
                        graph.add_lc_measurement(i, j, m)
                    }
                    .map_err(|e| bad(ln, e.to_string()))?;
                }
                other => return Err(bad(ln, format!("unknown record {other:?}"))),
            }
        }
        for f in fixed {
            graph.check_node(f)?;
            graph.nodes[f].fixed = true;
        }
        Ok(graph)
    }
}

fn solve_damped(h: &CscMatrix<f64>, g: &DVector<f64>, lambda: f64, dim: usize) -> Option<DVector<f64>> {
    // Marquardt scaling with a floor so zero-curvature directions still get damped
    let mut coo = CooMatrix::new(dim, dim);
    for (r, c, v) in h.triplet_iter() {
        coo.push(r, c, *v);
    }
    let max_diag = (0..dim)
        .filter_map(|k| h.get_entry(k, k).map(|e| e.into_value()))
        .fold(0.0f64, f64::max);
    for k in 0..dim {
        let d = h.get_entry(k, k).map_or(0.0, |e| e.into_value());
        coo.push(k, k, lambda * d.max(1e-9 * max_diag.max(1.0)));
    }
    let damped = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&damped).ok()?;
    let rhs = DMatrix::from_column_slice(dim, 1, (-g).as_slice());
    let step = chol.solve(&rhs);
    let step = DVector::from_column_slice(step.as_slice());
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Replaces each anchor's planar pose with the optimized one.
pub fn update_submaps(submaps: &[Submap], optimized: &[Pose2]) -> Result<Vec<Submap>> {
    if submaps.len() != optimized.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses for {} submaps",
            optimized.len(),
            submaps.len()
        )));
    }
    Ok(submaps.iter().zip(optimized).map(|(s, p)| s.with_planar(p)).collect())
}

/// Applies `t` to every state: the rigid gauge transform of a graph.
pub fn transform_states(states: &[Pose2], t: &Pose2) -> Vec<Pose2> {
    states.iter().map(|s| t.compose(s)).collect()
}
