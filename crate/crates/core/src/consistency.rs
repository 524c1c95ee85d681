//! Grid-based map self-consistency: how "thick" the merged bathymetry is
//! where submaps overlap.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose2, Rect};
use crate::measurement::Submap;

pub const NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub cell_size: f64,
    pub min_points_per_submap: usize,
    pub min_submaps_per_cell: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            cell_size: 1.0,
            min_points_per_submap: 3,
            min_submaps_per_cell: 2,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!("consistency.cell_size must be positive (got {})", self.cell_size)));
        }
        if self.min_points_per_submap == 0 {
            return Err(Error::Config("consistency.min_points_per_submap must be at least 1".into()));
        }
        if self.min_submaps_per_cell < 2 {
            return Err(Error::Config("consistency.min_submaps_per_cell must be at least 2".into()));
        }
        Ok(())
    }
}

/// Regular x-y grid of optional values; row `j` covers
/// `[origin_y + j*cell, origin_y + (j+1)*cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<Option<f64>>,
}

impl Raster {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values[j * self.nx + i]
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + (i as f64 + 0.5) * self.cell_size,
            self.origin_y + (j as f64 + 0.5) * self.cell_size,
        )
    }

    /// Value of the cell containing `(x, y)`, if any.
    pub fn at(&self, x: f64, y: f64) -> Option<f64> {
        let i = ((x - self.origin_x) / self.cell_size).floor();
        let j = ((y - self.origin_y) / self.cell_size).floor();
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.ny as f64 {
            return None;
        }
        self.get(i as usize, j as usize)
    }

    pub fn filled(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| (k % self.nx, k / self.nx, v)))
    }

    /// ESRI ASCII grid, north row first, empty cells as [`NODATA`].
    pub fn to_esri_ascii(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "ncols {}", self.nx);
        let _ = writeln!(out, "nrows {}", self.ny);
        let _ = writeln!(out, "xllcorner {}", self.origin_x);
        let _ = writeln!(out, "yllcorner {}", self.origin_y);
        let _ = writeln!(out, "cellsize {}", self.cell_size);
        let _ = writeln!(out, "NODATA_value {NODATA}");
        for j in (0..self.ny).rev() {
            let row: Vec<String> = (0..self.nx)
                .map(|i| self.get(i, j).map_or_else(|| NODATA.to_string(), |v| format!("{v:.6}")))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    /// `x,y,value` per filled cell centre.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value\n");
        for (i, j, v) in self.filled() {
            let (x, y) = self.cell_center(i, j);
            let _ = writeln!(out, "{x:.6},{y:.6},{v:.9}");
        }
        out
    }

    pub fn from_esri_ascii(text: &str) -> Result<Raster> {
        let bad = |d: String| Error::InvalidInput(format!("ESRI ASCII grid: {d}"));
        let mut lines = text.lines();
        let mut header = BTreeMap::new();
        for _ in 0..6 {
            let line = lines.next().ok_or_else(|| bad("truncated header".into()))?;
            let mut it = line.split_whitespace();
            let (Some(k), Some(v)) = (it.next(), it.next()) else {
                return Err(bad(format!("bad header line {line:?}")));
            };
            let v: f64 = v.parse().map_err(|_| bad(format!("bad header value {v:?}")))?;
            header.insert(k.to_ascii_lowercase(), v);
        }
        let field = |k: &str| header.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let (nx, ny) = (field("ncols")? as usize, field("nrows")? as usize);
        let nodata = field("nodata_value")?;
        let mut values = vec![None; nx * ny];
        for j in (0..ny).rev() {
            let line = lines.next().ok_or_else(|| bad("missing rows".into()))?;
            let row: Vec<&str> = line.split_whitespace().collect();
            if row.len() != nx {
                return Err(bad(format!("row with {} values, expected {nx}", row.len())));
            }
            for (i, v) in row.iter().enumerate() {
                let v: f64 = v.parse().map_err(|_| bad(format!("bad value {v:?}")))?;
                values[j * nx + i] = (v != nodata).then_some(v);
            }
        }
        Ok(Raster {
            origin_x: field("xllcorner")?,
            origin_y: field("yllcorner")?,
            cell_size: field("cellsize")?,
            nx,
            ny,
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyMap {
    pub raster: Raster,
    /// RMS over covered cells; `None` when no cell has multi-submap coverage.
    pub rms: Option<f64>,
    pub covered_cells: usize,
}

/// Per-cell `(sum of depth, count)` of one submap's points.
type CellSums = BTreeMap<(usize, usize), (f64, usize)>;

struct Grid {
    origin_x: f64,
    origin_y: f64,
    cell: f64,
    nx: usize,
    ny: usize,
}

impl Grid {
    /// Grid anchored at the min corner of the union footprint, so it moves
    /// rigidly with the map.
    fn covering(clouds: &[Vec<Point3<f64>>], cell: f64) -> Option<Grid> {
        let rect = clouds
            .iter()
            .filter_map(|c| Rect::from_points(c))
            .reduce(|a, b| a.union(&b))?;
        let nx = ((rect.width() / cell).floor() as usize) + 1;
        let ny = ((rect.height() / cell).floor() as usize) + 1;
        Some(Grid {
            origin_x: rect.min_x,
            origin_y: rect.min_y,
            cell,
            nx,
            ny,
        })
    }

    fn index(&self, p: &Point3<f64>) -> (usize, usize) {
        let i = (((p.x - self.origin_x) / self.cell).floor().max(0.0) as usize).min(self.nx - 1);
        let j = (((p.y - self.origin_y) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        (i, j)
    }

    fn sums(&self, cloud: &[Point3<f64>]) -> CellSums {
        let mut sums = CellSums::new();
        for p in cloud {
            let e = sums.entry(self.index(p)).or_insert((0.0, 0));
            e.0 += p.z;
            e.1 += 1;
        }
        sums
    }

    fn raster(&self, values: Vec<Option<f64>>) -> Raster {
        Raster {
            origin_x: self.origin_x,
            origin_y: self.origin_y,
            cell_size: self.cell,
            nx: self.nx,
            ny: self.ny,
            values,
        }
    }
}

fn world_clouds(submaps: &[Submap], poses: &[Pose2]) -> Result<Vec<Vec<Point3<f64>>>> {
    if submaps.is_empty() {
        return Err(Error::InvalidInput("no submaps".into()));
    }
    if submaps.len() != poses.len() {
        return Err(Error::InvalidInput(format!(
            "{} poses for {} submaps",
            poses.len(),
            submaps.len()
        )));
    }
    Ok(submaps
        .par_iter()
        .zip(poses.par_iter())
        .map(|(s, p)| s.world_points_at(p))
        .collect())
}

/// Per-cell pairwise RMS disparity of per-submap mean depths.
pub fn consistency_map(submaps: &[Submap], poses: &[Pose2], cfg: &ConsistencyConfig) -> Result<ConsistencyMap> {
    cfg.validate()?;
    let clouds = world_clouds(submaps, poses)?;
    let Some(grid) = Grid::covering(&clouds, cfg.cell_size) else {
        return Err(Error::InvalidInput("submaps contain no points".into()));
    };
    let per_submap: Vec<CellSums> = clouds.par_iter().map(|c| grid.sums(c)).collect();

    let mut means: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for sums in &per_submap {
        for (&cell, &(sum, n)) in sums {
            if n >= cfg.min_points_per_submap {
                means.entry(cell).or_default().push(sum / n as f64);
            }
        }
    }
    let mut values = vec![None; grid.nx * grid.ny];
    let mut total = 0.0;
    let mut covered = 0;
    for ((i, j), m) in &means {
        if m.len() < cfg.min_submaps_per_cell {
            continue;
        }
        let err = pairwise_rms(m);
        values[j * grid.nx + i] = Some(err);
        total += err * err;
        covered += 1;
    }
    let rms = (covered > 0).then(|| (total / covered as f64).sqrt());
    Ok(ConsistencyMap {
        raster: grid.raster(values),
        rms,
        covered_cells: covered,
    })
}

fn pairwise_rms(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (a, va) in values.iter().enumerate() {
        for vb in &values[a + 1..] {
            sum += (va - vb) * (va - vb);
            pairs += 1;
        }
    }
    (sum / pairs as f64).sqrt()
}

/// Mean depth per cell over all points of all submaps.
pub fn depth_raster(submaps: &[Submap], poses: &[Pose2], cell_size: f64) -> Result<Raster> {
    if !(cell_size > 0.0) {
        return Err(Error::InvalidInput(format!("cell size must be positive (got {cell_size})")));
    }
    let clouds = world_clouds(submaps, poses)?;
    let Some(grid) = Grid::covering(&clouds, cell_size) else {
        return Err(Error::InvalidInput("submaps contain no points".into()));
    };
    let mut acc = vec![(0.0, 0usize); grid.nx * grid.ny];
    for c in &clouds {
        for ((i, j), (sum, n)) in grid.sums(c) {
            let e = &mut acc[j * grid.nx + i];
            e.0 += sum;
            e.1 += n;
        }
    }
    let values = acc
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(grid.raster(values))
}
