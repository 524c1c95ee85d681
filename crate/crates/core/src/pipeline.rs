//! End-to-end runs: simulate a survey, run SLAM on it, evaluate maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::consistency::{consistency_map, depth_raster, ConsistencyMap, Raster};
use crate::error::{Error, Result};
use crate::format::{encode_submaps, write_file, Loaded, Survey};
use crate::geometry::{Pose2, Pose3};
use crate::measurement::{GaussianRelativePose, Submap};
use crate::pose_graph::{dr_information, update_submaps, EdgeKind, PoseGraph, SolverReport};
use crate::registration::{detect_overlaps, floor_information, gicp_register, RegistrationResult};
use crate::submap::{build_submaps, condition_submap};
use crate::synth::{add_beam_noise, corrupt_navigation, generate_terrain, simulate_survey};

/// Generates terrain, flies the survey, adds beam noise and corrupts the
/// navigation at the submap boundaries the SLAM run will use.
pub fn simulate(cfg: &PipelineConfig) -> Result<Survey> {
    cfg.validate()?;
    let terrain = generate_terrain(&cfg.terrain)?;
    let sim = simulate_survey(&terrain, &cfg.survey)?;
    let pings = add_beam_noise(&sim.pings, cfg.noise.sigma_range, cfg.noise.outlier_rate, cfg.noise.seed)?;
    // partition on the true poses; submaps are rigid so DR yields the same cut
    let partition = build_submaps(&pings, &sim.truth_poses, &cfg.submap)?;
    let boundaries: Vec<usize> = partition.iter().map(|s| s.ping_range.start).collect();
    let dr = corrupt_navigation(&sim.truth_poses, &boundaries, &cfg.drift);
    let pings = pings
        .into_iter()
        .zip(&dr)
        .map(|(mut p, pose)| {
            p.sensor_pose = *pose;
            p
        })
        .collect();
    Survey::new(pings, Some(sim.truth_poses))
}

/// Raw submaps from the DR stream, then conditioned in parallel.
pub fn prepare_submaps(survey: &Survey, cfg: &PipelineConfig) -> Result<Vec<Submap>> {
    let raw = build_submaps(&survey.pings, &survey.dr_poses(), &cfg.submap)?;
    if raw.is_empty() {
        return Err(Error::InvalidInput("survey produced no submaps".into()));
    }
    let conditioned: Vec<Submap> = raw.par_iter().map(|s| condition_submap(s, &cfg.submap)).collect();
    if let Some(s) = conditioned.iter().find(|s| s.points.is_empty()) {
        return Err(Error::InvalidInput(format!("submap {} is empty after conditioning", s.id)));
    }
    Ok(conditioned)
}

/// Planar anchor poses, as used for every map evaluation.
pub fn planar_poses(submaps: &[Submap]) -> Vec<Pose2> {
    submaps.iter().map(|s| s.anchor.project_se2()).collect()
}

/// One registration of a source submap against its overlapping set.
#[derive(Debug, Clone)]
pub struct Registration {
    pub source: usize,
    pub targets: Vec<usize>,
    pub pass: usize,
    pub result: RegistrationResult,
}

/// Registers each source against the rigid union of its earlier overlapping
/// submaps, placed at `poses`.
pub fn register_overlaps(submaps: &[Submap], poses: &[Pose2], cfg: &PipelineConfig, pass: usize) -> Vec<Registration> {
    let candidates = detect_overlaps(submaps, poses, cfg.gicp.min_overlap_fraction);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for c in &candidates {
        groups.entry(c.source_id).or_default().push(c.target_id);
    }
    let jobs: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
    jobs.into_par_iter()
        .map(|(source, mut targets)| {
            targets.sort_unstable();
            let placed: Vec<Submap> = targets.iter().map(|&t| submaps[t].with_planar(&poses[t])).collect();
            let reference = poses[targets[0]];
            let init = reference.relative(&poses[source]);
            let result = gicp_register(&submaps[source], &placed, &init, &cfg.gicp);
            Registration { source, targets, pass, result }
        })
        .collect()
}

/// Pairwise loop closures from one multi-target registration.
///
/// The registration gives the source pose relative to the first target; for
/// each target `i` that is re-expressed relative to `i` through the current
/// estimate of `i` relative to the first target. The information is rotated
/// into frame `i` and shared equally between the emitted edges, so one
/// registration does not count several times over.
pub fn loop_closures(reg: &Registration, poses: &[Pose2]) -> Vec<(usize, usize, GaussianRelativePose)> {
    let reference = poses[reg.targets[0]];
    let t = reg.result.transform;
    let share = 1.0 / reg.targets.len() as f64;
    reg.targets
        .iter()
        .map(|&i| {
            let link = poses[i].relative(&reference);
            let mean = link.compose(&t.mean);
            let mut rot = Matrix3::identity();
            rot.fixed_view_mut::<2, 2>(0, 0).copy_from(&link.rotation());
            let information = floor_information(&(rot * t.information * rot.transpose() * share));
            (i, reg.source, GaussianRelativePose { mean, information })
        })
        .collect()
}

/// Along-track distance travelled between two ping indices of the DR stream.
fn travelled(dr: &[Pose3], from: usize, to: usize) -> f64 {
    let (a, b) = (from.min(to), from.max(to));
    dr[a..=b]
        .windows(2)
        .map(|w| (w[1].translation() - w[0].translation()).xy().norm())
        .sum()
}

fn anchor_index(s: &Submap) -> usize {
    (s.ping_range.start + s.ping_range.end - 1) / 2
}

/// DR chain over the submap anchors.
pub fn dr_graph(submaps: &[Submap], dr: &[Pose3], cfg: &PipelineConfig) -> Result<PoseGraph> {
    let poses = planar_poses(submaps);
    let mut graph = PoseGraph::new(&poses);
    for k in 0..submaps.len().saturating_sub(1) {
        let interval = travelled(dr, anchor_index(&submaps[k]), anchor_index(&submaps[k + 1]));
        let info = dr_information(cfg.drift.sigma_xy.max(1e-6), cfg.drift.sigma_theta.max(1e-9), interval, cfg.submap.max_length)?;
        graph.add_dr_edge(k, GaussianRelativePose::new(poses[k].relative(&poses[k + 1]), info)?)?;
    }
    Ok(graph)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub rms: Option<f64>,
    pub covered_cells: usize,
    /// RMS is taken over grid cells, not over points.
    pub basis: String,
    pub cell_size: f64,
}

impl ConsistencySummary {
    fn of(map: &ConsistencyMap, cell_size: f64) -> Self {
        Self {
            rms: map.rms,
            covered_cells: map.covered_cells,
            basis: "cells".into(),
            cell_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub initial_rms: Option<f64>,
    pub optimized_rms: Option<f64>,
    pub initial: ConsistencySummary,
    pub optimized: ConsistencySummary,
    pub ping_count: usize,
    pub beam_count: usize,
    pub submap_count: usize,
    pub dr_edge_count: usize,
    pub lc_edge_count: usize,
    pub registrations_attempted: usize,
    pub registrations_converged: usize,
    pub solver: SolverReport,
    /// Horizontal RMS error of the submap anchors against truth.
    pub trajectory_rmse_dr: Option<f64>,
    pub trajectory_rmse_optimized: Option<f64>,
    /// Largest horizontal distance between an optimized anchor and its DR pose.
    pub max_deviation_from_dr: f64,
    /// Wall-clock seconds per stage; excluded from reproducibility checks.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// The report without timings, for run-to-run comparisons.
    pub fn metrics(&self) -> RunReport {
        RunReport {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Everything a SLAM run produces.
#[derive(Debug, Clone)]
pub struct SlamOutput {
    pub report: RunReport,
    pub initial_submaps: Vec<Submap>,
    pub optimized_submaps: Vec<Submap>,
    pub graph: PoseGraph,
    pub registrations: Vec<Registration>,
    pub initial_consistency: ConsistencyMap,
    pub optimized_consistency: ConsistencyMap,
    pub truth_anchors: Option<Vec<Pose2>>,
}

fn rmse(a: &[Pose2], b: &[Pose2]) -> f64 {
    let sum: f64 = a.iter().zip(b).map(|(p, q)| (p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sum();
    (sum / a.len() as f64).sqrt()
}

struct Timer(BTreeMap<String, f64>, Instant);

impl Timer {
    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.0.insert(stage.into(), (now - self.1).as_secs_f64());
        self.1 = now;
    }
}

/// Builds submaps, registers overlaps, optimizes the pose graph and
/// re-evaluates map consistency.
pub fn run_slam(survey: &Survey, cfg: &PipelineConfig) -> Result<SlamOutput> {
    cfg.validate()?;
    let mut timer = Timer(BTreeMap::new(), Instant::now());
    let submaps = prepare_submaps(survey, cfg)?;
    timer.lap("submaps");
    let dr = survey.dr_poses();
    let initial_poses = planar_poses(&submaps);
    let initial_consistency = consistency_map(&submaps, &initial_poses, &cfg.consistency)?;
    timer.lap("initial_consistency");

    let mut poses = initial_poses.clone();
    let mut registrations = Vec::new();
    let mut graph = dr_graph(&submaps, &dr, cfg)?;
    let mut solver = SolverReport {
        initial_cost: 0.0,
        final_cost: 0.0,
        iterations: 0,
        converged: true,
        gradient_norm: 0.0,
    };
    let mut registration_secs = 0.0;
    let mut optimize_secs = 0.0;
    for pass in 0..cfg.pipeline.repeat {
        let start = Instant::now();
        let regs = register_overlaps(&submaps, &poses, cfg, pass);
        registration_secs += start.elapsed().as_secs_f64();
        let start = Instant::now();
        graph = dr_graph(&submaps, &dr, cfg)?;
        for reg in regs.iter().filter(|r| r.result.converged) {
            for (i, j, m) in loop_closures(reg, &poses) {
                graph.add_lc_measurement(i, j, m)?;
            }
        }
        if regs.is_empty() {
            warn!("pass {pass}: no overlapping submaps, keeping dead reckoning");
        }
        graph.set_states(&poses)?;
        solver = graph.optimize(&cfg.solver)?;
        poses = graph.states();
        optimize_secs += start.elapsed().as_secs_f64();
        info!(
            "pass {pass}: {} registrations ({} converged), cost {:.4e} -> {:.4e}",
            regs.len(),
            regs.iter().filter(|r| r.result.converged).count(),
            solver.initial_cost,
            solver.final_cost
        );
        registrations.extend(regs);
    }
    timer.0.insert("registration".into(), registration_secs);
    timer.0.insert("optimization".into(), optimize_secs);
    timer.1 = Instant::now();

    let optimized_submaps = update_submaps(&submaps, &poses)?;
    let optimized_consistency = consistency_map(&optimized_submaps, &planar_poses(&optimized_submaps), &cfg.consistency)?;
    timer.lap("optimized_consistency");

    let truth_anchors = survey
        .truth
        .as_ref()
        .map(|t| submaps.iter().map(|s| t[anchor_index(s)].project_se2()).collect::<Vec<_>>());
    let final_poses = planar_poses(&optimized_submaps);
    let max_deviation_from_dr = final_poses
        .iter()
        .zip(&initial_poses)
        .map(|(a, b)| (a.x - b.x).hypot(a.y - b.y))
        .fold(0.0, f64::max);
    let report = RunReport {
        initial_rms: initial_consistency.rms,
        optimized_rms: optimized_consistency.rms,
        initial: ConsistencySummary::of(&initial_consistency, cfg.consistency.cell_size),
        optimized: ConsistencySummary::of(&optimized_consistency, cfg.consistency.cell_size),
        ping_count: survey.pings.len(),
        beam_count: survey.beam_count(),
        submap_count: submaps.len(),
        dr_edge_count: graph.count(EdgeKind::Dr),
        lc_edge_count: graph.count(EdgeKind::Lc),
        registrations_attempted: registrations.iter().filter(|r| r.pass + 1 == cfg.pipeline.repeat).count(),
        registrations_converged: registrations
            .iter()
            .filter(|r| r.pass + 1 == cfg.pipeline.repeat && r.result.converged)
            .count(),
        solver,
        trajectory_rmse_dr: truth_anchors.as_ref().map(|t| rmse(&initial_poses, t)),
        trajectory_rmse_optimized: truth_anchors.as_ref().map(|t| rmse(&final_poses, t)),
        max_deviation_from_dr,
        timings: timer.0,
    };
    Ok(SlamOutput {
        report,
        initial_submaps: submaps,
        optimized_submaps,
        graph,
        registrations,
        initial_consistency,
        optimized_consistency,
        truth_anchors,
    })
}

fn trajectory_csv(out: &SlamOutput) -> String {
    let mut s = String::from("submap,dr_x,dr_y,dr_theta,opt_x,opt_y,opt_theta,truth_x,truth_y,truth_theta\n");
    let dr = planar_poses(&out.initial_submaps);
    let opt = planar_poses(&out.optimized_submaps);
    for (k, (a, b)) in dr.iter().zip(&opt).enumerate() {
        let _ = write!(s, "{k},{},{},{},{},{},{}", a.x, a.y, a.theta, b.x, b.y, b.theta);
        match &out.truth_anchors {
            Some(t) => {
                let _ = writeln!(s, ",{},{},{}", t[k].x, t[k].y, t[k].theta);
            }
            None => s.push_str(",,,\n"),
        }
    }
    s
}

fn registrations_csv(regs: &[Registration]) -> String {
    let mut s = String::from("pass,source,targets,converged,iteration,cost\n");
    for r in regs {
        let targets = r.targets.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for (k, c) in r.result.cost_history.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{},{k},{c}", r.pass, r.source, targets, r.result.converged);
        }
    }
    s
}

/// Writes rasters, graph, trajectory, registration diagnostics, the
/// optimized map and `report.json` into `dir`.
pub fn write_outputs(out: &SlamOutput, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let cell = cfg.consistency.cell_size;
    let depth_initial = depth_raster(&out.initial_submaps, &planar_poses(&out.initial_submaps), cell)?;
    let depth_optimized = depth_raster(&out.optimized_submaps, &planar_poses(&out.optimized_submaps), cell)?;
    let rasters: [(&str, &Raster); 4] = [
        ("depth_initial", &depth_initial),
        ("depth_optimized", &depth_optimized),
        ("consistency_initial", &out.initial_consistency.raster),
        ("consistency_optimized", &out.optimized_consistency.raster),
    ];
    for (name, r) in rasters {
        write_file(&dir.join(format!("{name}.asc")), r.to_esri_ascii())?;
        write_file(&dir.join(format!("{name}.csv")), r.to_csv())?;
    }
    write_file(&dir.join("pose_graph.txt"), out.graph.to_text())?;
    write_file(&dir.join("trajectory.csv"), trajectory_csv(out))?;
    write_file(&dir.join("registrations.csv"), registrations_csv(&out.registrations))?;
    write_file(&dir.join("optimized.bsmap"), encode_submaps(&out.optimized_submaps))?;
    write_file(&dir.join("initial.bsmap"), encode_submaps(&out.initial_submaps))?;
    write_file(&dir.join("report.json"), report_json(&out.report))?;
    Ok(())
}

pub fn report_json<T: Serialize>(report: &T) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: String,
    pub submap_count: usize,
    pub consistency: ConsistencySummary,
    /// Set when no cell is covered by two or more submaps.
    pub zero_coverage: bool,
}

/// Consistency of a survey (at its DR poses) or of a saved submap map.
pub fn evaluate(input: &Loaded, cfg: &PipelineConfig) -> Result<(EvalReport, ConsistencyMap)> {
    let (source, submaps) = match input {
        Loaded::Survey(s) => ("survey", prepare_submaps(s, cfg)?),
        Loaded::Submaps(m) => ("submaps", m.clone()),
    };
    let map = consistency_map(&submaps, &planar_poses(&submaps), &cfg.consistency)?;
    let report = EvalReport {
        source: source.into(),
        submap_count: submaps.len(),
        consistency: ConsistencySummary::of(&map, cfg.consistency.cell_size),
        zero_coverage: map.rms.is_none(),
    };
    Ok((report, map))
}
