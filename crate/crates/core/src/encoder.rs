//! Ground-truth target generation.

use crate::domain::{to_map_coords, validate_polyline, Grid, GridSpec, Keypoint, Lane, LaneSet};
use crate::error::{Error, Result};

/// Past this exponent `exp(-t)` underflows to exactly zero in f64, so
/// skipping those cells changes nothing.
const GAUSSIAN_CUTOFF: f64 = 746.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Gaussian standard deviation in map cells.
    pub sigma: f64,
    /// Keypoints sampled on each lane (K).
    pub points_per_lane: usize,
    /// Output stride (r).
    pub stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sigma: 0.3,
            points_per_lane: 10,
            stride: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.points_per_lane < 2 {
            return Err(Error::Config(format!(
                "points_per_lane must be at least 2, got {}",
                self.points_per_lane
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Ground-truth adjacency offsets of one keypoint, in map cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyTarget {
    /// Cell that owns this keypoint.
    pub cell: (usize, usize),
    /// Continuous map position of the keypoint.
    pub anchor: [f64; 2],
    pub lane: usize,
    pub point: usize,
    /// `g_k - p` for every keypoint `g_k` of the owning lane.
    pub offsets: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub spec: GridSpec,
    pub confidence: Grid,
    pub quant: Grid,
    pub offsets: Grid,
    pub mask: Grid,
    /// One entry per masked cell, in lane then point order.
    pub adjacency: Vec<AdjacencyTarget>,
}

impl Targets {
    pub fn masked_cells(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Resamples a polyline at `k` evenly spaced rows from its bottom to its top.
pub fn sample_lane(points: &[Keypoint], k: usize) -> Result<Lane> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {k}")));
    }
    if points.len() >= 2 && points.iter().all(|p| p.y == points[0].y) {
        return Err(Error::InvalidLane("horizontal lane has no vertical extent".into()));
    }
    validate_polyline(points)?;
    let bottom = points[0].y;
    let top = points[points.len() - 1].y;
    let mut out = Vec::with_capacity(k);
    let mut seg = 0;
    for j in 0..k {
        let y = if j == 0 {
            bottom
        } else if j == k - 1 {
            top
        } else {
            bottom + (top - bottom) * j as f64 / (k - 1) as f64
        };
        while seg + 2 < points.len() && y < points[seg + 1].y {
            seg += 1;
        }
        let (a, b) = (points[seg], points[seg + 1]);
        let t = (a.y - y) / (a.y - b.y);
        out.push(Keypoint::new(a.x + t * (b.x - a.x), y));
    }
    Lane::new(out)
}

/// Splats `exp(-d^2 / (2 sigma^2))` around cell `(ix, iy)` with element-wise max.
pub(crate) fn splat_gaussian(conf: &mut Grid, ix: usize, iy: usize, sigma: f64) {
    let two_s2 = 2.0 * sigma * sigma;
    let radius = (GAUSSIAN_CUTOFF * two_s2).sqrt().ceil() as isize;
    let (w, h) = (conf.width() as isize, conf.height() as isize);
    let (cx, cy) = (ix as isize, iy as isize);
    for row in (cy - radius).max(0)..=(cy + radius).min(h - 1) {
        let dy = (row - cy) as f64;
        for col in (cx - radius).max(0)..=(cx + radius).min(w - 1) {
            let dx = (col - cx) as f64;
            let t = (dx * dx + dy * dy) / two_s2;
            if t > GAUSSIAN_CUTOFF {
                continue;
            }
            let v = (-t).exp();
            let i = conf.index(0, row as usize, col as usize);
            let slot = &mut conf.data_mut()[i];
            if v > *slot {
                *slot = v;
            }
        }
    }
}

pub fn encode(lanes: &LaneSet, spec: &GridSpec, cfg: &EncoderConfig) -> Result<Targets> {
    cfg.validate()?;
    if cfg.stride != spec.stride {
        return Err(Error::Config(format!(
            "encoder stride {} does not match grid stride {}",
            cfg.stride, spec.stride
        )));
    }
    let r = spec.stride as f64;
    let mut confidence = Grid::zeros(*spec, 1);
    let mut quant = Grid::zeros(*spec, 2);
    let mut offsets = Grid::zeros(*spec, 2);
    let mut mask = Grid::zeros(*spec, 1);
    let mut adjacency = Vec::new();

    for (li, lane) in lanes.lanes.iter().enumerate() {
        let sampled = sample_lane(lane.points(), cfg.points_per_lane)?;
        let coords = sampled
            .points()
            .iter()
            .map(|&p| to_map_coords(p, spec))
            .collect::<Result<Vec<_>>>()?;
        let start = sampled.start();
        let lane_map: Vec<[f64; 2]> = coords.iter().map(|c| [c.mx, c.my]).collect();

        for (j, (p, c)) in sampled.points().iter().zip(&coords).enumerate() {
            splat_gaussian(&mut confidence, c.ix, c.iy, cfg.sigma);
            // First claim wins: lower lane index, then lower point index.
            if mask.get(0, c.iy, c.ix) > 0.0 {
                continue;
            }
            mask.set(0, c.iy, c.ix, 1.0);
            quant.set(0, c.iy, c.ix, c.qx);
            quant.set(1, c.iy, c.ix, c.qy);
            offsets.set(0, c.iy, c.ix, (start.x - p.x) / r);
            offsets.set(1, c.iy, c.ix, (start.y - p.y) / r);
            adjacency.push(AdjacencyTarget {
                cell: (c.ix, c.iy),
                anchor: [c.mx, c.my],
                lane: li,
                point: j,
                offsets: lane_map.iter().map(|g| [g[0] - c.mx, g[1] - c.my]).collect(),
            });
        }
    }

    Ok(Targets {
        spec: *spec,
        confidence,
        quant,
        offsets,
        mask,
        adjacency,
    })
}
