//! Ground-truth grids from trajectories.

use super::{Trajectory, TrajectorySet};
use crate::error::{Error, Result};
use crate::mapgrid::{ProbGrid, ScalarGrid, SemanticMap};

/// Placement of the working grid in world meters. Cell `(r, c)` spans
/// `[origin_x + c·res, origin_x + (c+1)·res)` horizontally and likewise
/// vertically for rows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl GridGeometry {
    pub fn new(height: usize, width: usize, resolution: f64) -> Result<Self> {
        if height == 0 || width == 0 || !(resolution > 0.0) {
            return Err(Error::Config(format!(
                "invalid grid geometry {height}x{width} at {resolution} m/px"
            )));
        }
        Ok(GridGeometry {
            height,
            width,
            resolution,
            origin_x: 0.0,
            origin_y: 0.0,
        })
    }

    pub fn of_map(map: &SemanticMap) -> Self {
        GridGeometry {
            height: map.height(),
            width: map.width(),
            resolution: map.resolution(),
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }

    /// Flat index of the cell containing `(x, y)`, if inside.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let c = ((x - self.origin_x) / self.resolution).floor();
        let r = ((y - self.origin_y) / self.resolution).floor();
        if c >= 0.0 && r >= 0.0 && (c as usize) < self.width && (r as usize) < self.height {
            Some(r as usize * self.width + c as usize)
        } else {
            None
        }
    }

    /// World coordinates of a cell center.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.resolution,
            self.origin_y + (row as f64 + 0.5) * self.resolution,
        )
    }
}

/// Sample counts per cell and their normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub counts: ScalarGrid,
    /// `None` when no sample landed inside the grid.
    pub distribution: Option<ProbGrid>,
    pub out_of_bounds: usize,
}

impl Raster {
    pub fn is_degenerate(&self) -> bool {
        self.distribution.is_none()
    }

    /// The distribution, or the all-zero grid when degenerate.
    pub fn grid(&self) -> ScalarGrid {
        match &self.distribution {
            Some(p) => p.as_grid().clone(),
            None => ScalarGrid::zeros(self.counts.height(), self.counts.width()),
        }
    }
}

fn accumulate<'a>(
    geom: &GridGeometry,
    samples: impl Iterator<Item = (f64, f64)> + 'a,
) -> Raster {
    let mut counts = ScalarGrid::zeros(geom.height, geom.width);
    let mut out_of_bounds = 0;
    for (x, y) in samples {
        match geom.cell_of(x, y) {
            Some(i) => counts.data_mut()[i] += 1.0,
            None => out_of_bounds += 1,
        }
    }
    let distribution = counts.to_distribution();
    Raster {
        counts,
        distribution,
        out_of_bounds,
    }
}

/// Time-density occupancy: every sample adds one count to its cell.
pub fn rasterize_occupancy(traj: &TrajectorySet, geom: &GridGeometry) -> Raster {
    accumulate(
        geom,
        traj.agents
            .iter()
            .flat_map(|a| a.samples.iter().map(|s| (s.x, s.y))),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopParams {
    /// Speed below which a sample counts as stationary (m/s).
    pub v_stop: f64,
    /// Minimum duration of a stationary run (s).
    pub t_stop: f64,
}

impl Default for StopParams {
    fn default() -> Self {
        StopParams {
            v_stop: 0.25,
            t_stop: 1.0,
        }
    }
}

fn stop_mask(agent: &Trajectory, p: &StopParams) -> Vec<bool> {
    let speeds = agent.speeds();
    let n = speeds.len();
    let mut mask = vec![false; n];
    let mut i = 0;
    while i < n {
        if speeds[i] >= p.v_stop {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && speeds[i] < p.v_stop {
            i += 1;
        }
        let dur = agent.samples[i - 1].t - agent.samples[start].t;
        if dur >= p.t_stop {
            mask[start..i].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Samples belonging to slow runs (speed `< v_stop` for at least `t_stop`).
pub fn rasterize_stops(
    traj: &TrajectorySet,
    geom: &GridGeometry,
    params: &StopParams,
) -> Result<Raster> {
    if !(params.v_stop > 0.0) || !(params.t_stop > 0.0) {
        return Err(Error::Config(format!(
            "stop thresholds must be positive, got v={} t={}",
            params.v_stop, params.t_stop
        )));
    }
    let mut pts = Vec::new();
    for agent in &traj.agents {
        let mask = stop_mask(agent, params);
        pts.extend(
            agent
                .samples
                .iter()
                .zip(mask)
                .filter(|(_, m)| *m)
                .map(|(s, _)| (s.x, s.y)),
        );
    }
    Ok(accumulate(geom, pts.into_iter()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityRaster {
    /// Mean sample speed per cell in m/s; zero where uncovered.
    pub mean_speed: ScalarGrid,
    /// `mean_speed` divided by its maximum (all zero when nothing moves).
    pub normalized: ScalarGrid,
    pub coverage: Vec<bool>,
    pub out_of_bounds: usize,
}

/// Mean speed per cell over samples of agents with at least two samples.
pub fn rasterize_velocity(traj: &TrajectorySet, geom: &GridGeometry) -> VelocityRaster {
    let n = geom.height * geom.width;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    let mut out_of_bounds = 0;
    for agent in traj.agents.iter().filter(|a| a.samples.len() >= 2) {
        for (s, v) in agent.samples.iter().zip(agent.speeds()) {
            match geom.cell_of(s.x, s.y) {
                Some(i) => {
                    sum[i] += v;
                    count[i] += 1;
                }
                None => out_of_bounds += 1,
            }
        }
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let max = mean.iter().copied().fold(0.0, f64::max);
    let normalized = if max > 0.0 {
        mean.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; n]
    };
    VelocityRaster {
        mean_speed: ScalarGrid::new(geom.height, geom.width, mean).expect("sized by geometry"),
        normalized: ScalarGrid::new(geom.height, geom.width, normalized)
            .expect("sized by geometry"),
        coverage: count.iter().map(|&c| c > 0).collect(),
        out_of_bounds,
    }
}
