//! Lane construction from predicted maps.
//!
//! 1. Keypoints are the cells that pass the confidence threshold and win a
//!    horizontal `1 x nms_width` max window.
//! 2. Keypoints whose offset vector is shorter than `start_norm_limit` are
//!    starting-point candidates; candidates chained within `theta_dis` form
//!    one cluster whose mean position is the lane's starting point.
//! 3. Every other keypoint votes `position + offset` and joins the nearest
//!    starting point closer than `theta_dis`.
//!
//! All distances are in map cells. Step 3 is independent per keypoint and
//! runs either sequentially or on the rayon pool with identical results.

use rayon::prelude::*;

use crate::domain::{Grid, GridSpec, Keypoint, Lane, LaneSet, Scene};
use crate::error::{Error, Result};
use crate::losses::EPS;

/// Largest f64 below one; keeps refined positions inside their cell.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub keypoint_threshold: f64,
    /// Vote-to-start distance bound, in map cells.
    pub theta_dis: f64,
    /// Width of the horizontal max window, in cells.
    pub nms_width: usize,
    /// Offset magnitude below which a keypoint is a starting-point candidate.
    pub start_norm_limit: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            keypoint_threshold: 0.4,
            theta_dis: 4.0,
            nms_width: 3,
            start_norm_limit: 1.0,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keypoint_threshold > 0.0 && self.keypoint_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "keypoint threshold must be in (0, 1], got {}",
                self.keypoint_threshold
            )));
        }
        if !(self.theta_dis > 0.0) || !(self.start_norm_limit > 0.0) {
            return Err(Error::Config("theta_dis and start_norm_limit must be positive".into()));
        }
        if self.nms_width == 0 {
            return Err(Error::Config("nms_width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidKeypoint {
    pub cell: (usize, usize),
    /// Refined `[x, y]` in map cells.
    pub pos: [f64; 2],
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AssociationMode {
    Sequential,
    #[default]
    Parallel,
}

pub fn select_keypoints(conf: &Grid, quant: &Grid, cfg: &DecoderConfig) -> Result<Vec<ValidKeypoint>> {
    if conf.channels() != 1 || quant.channels() != 2 || conf.spec() != quant.spec() {
        return Err(Error::ShapeMismatch(
            "confidence (1 channel) and quant (2 channels) must share a grid".into(),
        ));
    }
    let (w, h) = (conf.width(), conf.height());
    let left = (cfg.nms_width - 1) / 2;
    let right = cfg.nms_width / 2;
    let mut out = Vec::new();
    for row in 0..h {
        for col in 0..w {
            let v = conf.get(0, row, col);
            // Probabilities are compared as the losses see them, clamped below 1.
            if !(v.min(1.0 - EPS) >= cfg.keypoint_threshold) {
                continue;
            }
            // Ties go to the leftmost cell of a plateau.
            let beats_left = (col.saturating_sub(left)..col).all(|c| v > conf.get(0, row, c));
            let beats_right = (col + 1..=(col + right).min(w - 1)).all(|c| v >= conf.get(0, row, c));
            if beats_left && beats_right {
                let qx = quant.get(0, row, col).clamp(0.0, BELOW_ONE);
                let qy = quant.get(1, row, col).clamp(0.0, BELOW_ONE);
                out.push(ValidKeypoint {
                    cell: (col, row),
                    pos: [col as f64 + qx, row as f64 + qy],
                    confidence: v,
                });
            }
        }
    }
    Ok(out)
}

#[inline]
fn offset_at(offsets: &Grid, k: &ValidKeypoint) -> [f64; 2] {
    let (col, row) = k.cell;
    [offsets.get(0, row, col), offsets.get(1, row, col)]
}

#[inline]
fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// One starting point: the center of a cluster of candidate keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct StartCluster {
    pub center: [f64; 2],
    /// Indices into the keypoint list.
    pub members: Vec<usize>,
    pub confidence: f64,
}

pub fn find_starting_points(offsets: &Grid, valid: &[ValidKeypoint], cfg: &DecoderConfig) -> Vec<StartCluster> {
    let candidates: Vec<usize> = (0..valid.len())
        .filter(|&i| {
            let o = offset_at(offsets, &valid[i]);
            o[0].hypot(o[1]) < cfg.start_norm_limit
        })
        .collect();

    // Union-find over theta_dis connectivity.
    let mut parent: Vec<usize> = (0..candidates.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for a in 0..candidates.len() {
        for b in a + 1..candidates.len() {
            if dist(valid[candidates[a]].pos, valid[candidates[b]].pos) <= cfg.theta_dis {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (a, &cell) in candidates.iter().enumerate() {
        let r = root(&mut parent, a);
        match groups.iter_mut().find(|(gr, _)| *gr == r) {
            Some((_, members)) => members.push(cell),
            None => groups.push((r, vec![cell])),
        }
    }
    groups
        .into_iter()
        .map(|(_, members)| {
            let n = members.len() as f64;
            let cx = members.iter().map(|&i| valid[i].pos[0]).sum::<f64>() / n;
            let cy = members.iter().map(|&i| valid[i].pos[1]).sum::<f64>() / n;
            let confidence = members.iter().map(|&i| valid[i].confidence).fold(0.0, f64::max);
            StartCluster {
                center: [cx, cy],
                members,
                confidence,
            }
        })
        .collect()
}

/// Starting-point estimate of a keypoint: its position plus its offset.
pub fn vote(k: &ValidKeypoint, offsets: &Grid) -> [f64; 2] {
    let o = offset_at(offsets, k);
    [k.pos[0] + o[0], k.pos[1] + o[1]]
}

/// Nearest center strictly closer than `theta_dis`; ties keep the lower index.
fn nearest_center(v: [f64; 2], clusters: &[StartCluster], theta_dis: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (ci, c) in clusters.iter().enumerate() {
        let d = dist(v, c.center);
        if d < theta_dis && best.is_none_or(|(_, bd)| d < bd) {
            best = Some((ci, d));
        }
    }
    best
}

/// Lane index and residual per keypoint; `None` for starting-point members
/// and for keypoints whose vote misses every center.
pub fn assign_keypoints(
    valid: &[ValidKeypoint],
    offsets: &Grid,
    clusters: &[StartCluster],
    cfg: &DecoderConfig,
    mode: AssociationMode,
) -> Vec<Option<(usize, f64)>> {
    let mut is_member = vec![false; valid.len()];
    for c in clusters {
        for &m in &c.members {
            is_member[m] = true;
        }
    }
    let one = |i: usize| -> Option<(usize, f64)> {
        if is_member[i] {
            return None;
        }
        nearest_center(vote(&valid[i], offsets), clusters, cfg.theta_dis)
    };
    match mode {
        AssociationMode::Sequential => (0..valid.len()).map(one).collect(),
        AssociationMode::Parallel => (0..valid.len()).into_par_iter().map(one).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLane {
    /// Image-space points, starting point first.
    pub lane: Lane,
    pub confidences: Vec<f64>,
    /// Vote-to-start distance of each point, in map cells (zero for the start).
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodedLaneSet {
    pub lanes: Vec<DecodedLane>,
}

impl DecodedLaneSet {
    pub fn lane_set(&self) -> LaneSet {
        LaneSet::new(self.lanes.iter().map(|l| l.lane.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.lanes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }
}

pub fn associate(
    valid: &[ValidKeypoint],
    offsets: &Grid,
    clusters: &[StartCluster],
    cfg: &DecoderConfig,
    mode: AssociationMode,
) -> DecodedLaneSet {
    let labels = assign_keypoints(valid, offsets, clusters, cfg, mode);
    let r = offsets.spec().stride as f64;

    // (y, x, confidence, residual) per lane, in map cells.
    let mut members: Vec<Vec<(f64, f64, f64, f64)>> = vec![Vec::new(); clusters.len()];
    for (k, label) in valid.iter().zip(&labels) {
        if let Some((ci, d)) = *label {
            members[ci].push((k.pos[1], k.pos[0], k.confidence, d));
        }
    }

    let mut lanes = Vec::new();
    for (cluster, mut pts) in clusters.iter().zip(members) {
        // Bottom to top; within a row the most confident point first.
        pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.2.total_cmp(&a.2)).then(a.1.total_cmp(&b.1)));
        let mut points = vec![Keypoint::new(cluster.center[0] * r, cluster.center[1] * r)];
        let mut confidences = vec![cluster.confidence];
        let mut residuals = vec![0.0];
        let mut last_y = cluster.center[1];
        for (y, x, c, d) in pts {
            if y < last_y {
                points.push(Keypoint::new(x * r, y * r));
                confidences.push(c);
                residuals.push(d);
                last_y = y;
            }
        }
        if points.len() < 2 {
            continue;
        }
        let lane = Lane::new(points).expect("points are strictly decreasing in y");
        lanes.push(DecodedLane {
            lane,
            confidences,
            residuals,
        });
    }
    lanes.sort_by(|a, b| {
        let (pa, pb) = (a.lane.start(), b.lane.start());
        pa.x.total_cmp(&pb.x).then(pb.y.total_cmp(&pa.y))
    });
    DecodedLaneSet { lanes }
}

/// Full decode of confidence, quantization and offset maps.
pub fn decode(
    conf: &Grid,
    quant: &Grid,
    offsets: &Grid,
    cfg: &DecoderConfig,
    mode: AssociationMode,
) -> Result<DecodedLaneSet> {
    cfg.validate()?;
    if offsets.channels() != 2 || offsets.spec() != conf.spec() {
        return Err(Error::ShapeMismatch(
            "offsets must be 2 channels on the confidence grid".into(),
        ));
    }
    let valid = select_keypoints(conf, quant, cfg)?;
    let clusters = find_starting_points(offsets, &valid, cfg);
    Ok(associate(&valid, offsets, &clusters, cfg, mode))
}

/// Decoded lanes as a scene in the input image frame.
pub fn to_scene(decoded: &DecodedLaneSet, spec: &GridSpec) -> Scene {
    Scene {
        width: spec.width_in,
        height: spec.height_in,
        lanes: decoded.lane_set(),
        tag: None,
    }
}
