//! Lane-set evaluation: IoU-based F1 over stroked lane masks, and row-wise
//! point accuracy.

use serde::{Deserialize, Serialize};

use crate::domain::{Lane, Scene};
use crate::error::{Error, Result};
use crate::matcher::{solve, CostMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CulaneConfig {
    pub iou_threshold: f64,
    /// Stroke width in pixels.
    pub lane_width: usize,
}

impl Default for CulaneConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            lane_width: 30,
        }
    }
}

impl CulaneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config("iou_threshold must be in (0, 1)".into()));
        }
        if self.lane_width == 0 {
            return Err(Error::Config("lane_width must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TusimpleConfig {
    /// A point is correct when `|dx| < pixel_tolerance`.
    pub pixel_tolerance: f64,
    /// A lane is a true positive when its accuracy exceeds this.
    pub lane_accuracy_threshold: f64,
    pub eval_rows: Vec<f64>,
}

impl TusimpleConfig {
    /// Rows every `step` pixels from the top of an image of `height` pixels.
    pub fn for_height(height: usize, step: usize) -> Self {
        Self {
            pixel_tolerance: 20.0,
            lane_accuracy_threshold: 0.85,
            eval_rows: (0..height).step_by(step.max(1)).map(|r| r as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_tolerance > 0.0) {
            return Err(Error::Config("pixel_tolerance must be positive".into()));
        }
        if !(self.lane_accuracy_threshold > 0.0 && self.lane_accuracy_threshold <= 1.0) {
            return Err(Error::Config("lane_accuracy_threshold must be in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Raw counts; summing counts over images and then calling [`EvalCounts::report`]
/// gives corpus-level scores.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Correct ground-truth points (row-wise metric only).
    pub correct_points: usize,
    /// Ground-truth points evaluated (row-wise metric only).
    pub total_points: usize,
}

impl std::ops::AddAssign for EvalCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.correct_points += o.correct_points;
        self.total_points += o.total_points;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl EvalCounts {
    pub fn report(&self, with_accuracy: bool) -> EvalReport {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        EvalReport {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision,
            recall,
            f1,
            accuracy: with_accuracy.then(|| ratio(self.correct_points, self.total_points)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Cells touched by the segment between two pixels, including both
/// neighbours where the segment passes exactly through a corner.
pub fn supercover(a: (i64, i64), b: (i64, i64), out: &mut Vec<(i64, i64)>) {
    let (dx, dy) = ((b.0 - a.0).abs(), (b.1 - a.1).abs());
    let (sx, sy) = ((b.0 - a.0).signum(), (b.1 - a.1).signum());
    let (mut x, mut y) = a;
    out.push((x, y));
    let (mut ix, mut iy) = (0, 0);
    while ix < dx || iy < dy {
        let decision = (1 + 2 * ix) * dy - (1 + 2 * iy) * dx;
        if decision == 0 {
            out.push((x + sx, y));
            out.push((x, y + sy));
            x += sx;
            y += sy;
            ix += 1;
            iy += 1;
        } else if decision < 0 {
            x += sx;
            ix += 1;
        } else {
            y += sy;
            iy += 1;
        }
        out.push((x, y));
    }
}

/// Binary stroke mask stored as disjoint sorted inclusive column spans per row.
#[derive(Debug, Clone, PartialEq)]
pub struct StrokeMask {
    width: usize,
    rows: Vec<Vec<(i64, i64)>>,
}

impl StrokeMask {
    /// Rasterizes `lane` as its supercover polyline dilated by a disk of
    /// diameter `lane_width`, clipped to the image.
    pub fn rasterize(lane: &Lane, width: usize, height: usize, lane_width: usize) -> Self {
        let mut centers = Vec::new();
        let px = |p: &crate::domain::Keypoint| (p.x.floor() as i64, p.y.floor() as i64);
        for w in lane.points().windows(2) {
            supercover(px(&w[0]), px(&w[1]), &mut centers);
        }
        centers.sort_unstable();
        centers.dedup();

        let radius = lane_width as f64 / 2.0;
        let reach = radius.floor() as i64;
        let half: Vec<i64> = (-reach..=reach)
            .map(|dy| ((radius * radius - (dy * dy) as f64).max(0.0)).sqrt().floor() as i64)
            .collect();

        let (w, h) = (width as i64, height as i64);
        let mut spans: Vec<Vec<(i64, i64)>> = vec![Vec::new(); height];
        for &(cx, cy) in &centers {
            for (k, dy) in (-reach..=reach).enumerate() {
                let y = cy + dy;
                if y < 0 || y >= h {
                    continue;
                }
                let lo = (cx - half[k]).max(0);
                let hi = (cx + half[k]).min(w - 1);
                if lo <= hi {
                    spans[y as usize].push((lo, hi));
                }
            }
        }
        for row in &mut spans {
            row.sort_unstable();
            let mut merged: Vec<(i64, i64)> = Vec::with_capacity(row.len());
            for &(lo, hi) in row.iter() {
                match merged.last_mut() {
                    Some(last) if lo <= last.1 + 1 => last.1 = last.1.max(hi),
                    _ => merged.push((lo, hi)),
                }
            }
            *row = merged;
        }
        Self { width, rows: spans }
    }

    pub fn area(&self) -> usize {
        self.rows.iter().flatten().map(|(lo, hi)| (hi - lo + 1) as usize).sum()
    }

    pub fn intersection(&self, other: &StrokeMask) -> usize {
        let mut total = 0;
        for (a, b) in self.rows.iter().zip(&other.rows) {
            let (mut i, mut j) = (0, 0);
            while i < a.len() && j < b.len() {
                let lo = a[i].0.max(b[j].0);
                let hi = a[i].1.min(b[j].1);
                if lo <= hi {
                    total += (hi - lo + 1) as usize;
                }
                if a[i].1 < b[j].1 {
                    i += 1;
                } else {
                    j += 1;
                }
            }
        }
        total
    }

    pub fn iou(&self, other: &StrokeMask) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        ratio(inter, union)
    }

    /// Dense row-major bitmap.
    pub fn to_bitmap(&self) -> Vec<bool> {
        let mut bits = vec![false; self.width * self.rows.len()];
        for (y, row) in self.rows.iter().enumerate() {
            for &(lo, hi) in row {
                for x in lo..=hi {
                    bits[y * self.width + x as usize] = true;
                }
            }
        }
        bits
    }
}

fn check_dims(pred: &Scene, gt: &Scene) -> Result<()> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    Ok(())
}

/// Pairwise IoU, rows are predictions.
pub fn iou_matrix(pred: &Scene, gt: &Scene, cfg: &CulaneConfig) -> Vec<Vec<f64>> {
    let masks = |s: &Scene| -> Vec<StrokeMask> {
        s.lanes
            .lanes
            .iter()
            .map(|l| StrokeMask::rasterize(l, s.width, s.height, cfg.lane_width))
            .collect()
    };
    let (pm, gm) = (masks(pred), masks(gt));
    pm.iter().map(|p| gm.iter().map(|g| p.iou(g)).collect()).collect()
}

pub fn culane_counts(pred: &Scene, gt: &Scene, cfg: &CulaneConfig) -> Result<EvalCounts> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    let (np, ng) = (pred.lanes.len(), gt.lanes.len());
    let mut tp = 0;
    if np > 0 && ng > 0 {
        let ious = iou_matrix(pred, gt, cfg);
        let cost: Vec<f64> = ious.iter().flatten().map(|v| 1.0 - v).collect();
        let assignment = solve(&CostMatrix::new(np, ng, cost)?);
        tp = assignment
            .pairs
            .iter()
            .filter(|&&(p, g)| ious[p][g] > cfg.iou_threshold)
            .count();
    }
    Ok(EvalCounts {
        tp,
        fp: np - tp,
        fn_: ng - tp,
        ..Default::default()
    })
}

pub fn culane_f1(pred: &Scene, gt: &Scene, cfg: &CulaneConfig) -> Result<EvalReport> {
    Ok(culane_counts(pred, gt, cfg)?.report(false))
}

/// Correct points of `pred` against `gt` over the evaluation rows, and the
/// number of rows `gt` covers.
fn row_hits(pred: Option<&Lane>, gt: &Lane, cfg: &TusimpleConfig) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for &row in &cfg.eval_rows {
        let Some(gx) = gt.x_at(row) else { continue };
        total += 1;
        if let Some(px) = pred.and_then(|p| p.x_at(row)) {
            if (px - gx).abs() < cfg.pixel_tolerance {
                hits += 1;
            }
        }
    }
    (hits, total)
}

pub fn tusimple_counts(pred: &Scene, gt: &Scene, cfg: &TusimpleConfig) -> Result<EvalCounts> {
    check_dims(pred, gt)?;
    cfg.validate()?;
    let (np, ng) = (pred.lanes.len(), gt.lanes.len());
    let gts = &gt.lanes.lanes;
    let preds = &pred.lanes.lanes;
    let totals: Vec<usize> = gts.iter().map(|g| row_hits(None, g, cfg).1).collect();
    let total_points = totals.iter().sum();

    let mut correct_points = 0;
    let mut tp = 0;
    if np > 0 && ng > 0 {
        let acc: Vec<Vec<(usize, f64)>> = preds
            .iter()
            .map(|p| {
                gts.iter()
                    .map(|g| {
                        let (hits, total) = row_hits(Some(p), g, cfg);
                        (hits, ratio(hits, total))
                    })
                    .collect()
            })
            .collect();
        let cost: Vec<f64> = acc.iter().flatten().map(|(_, a)| 1.0 - a).collect();
        let assignment = solve(&CostMatrix::new(np, ng, cost)?);
        for (p, g) in assignment.pairs {
            correct_points += acc[p][g].0;
            if acc[p][g].1 > cfg.lane_accuracy_threshold {
                tp += 1;
            }
        }
    }
    Ok(EvalCounts {
        tp,
        fp: np - tp,
        fn_: ng - tp,
        correct_points,
        total_points,
    })
}

pub fn tusimple_accuracy(pred: &Scene, gt: &Scene, cfg: &TusimpleConfig) -> Result<EvalReport> {
    Ok(tusimple_counts(pred, gt, cfg)?.report(true))
}
