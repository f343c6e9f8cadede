//! Training losses with exact analytic gradients.
//!
//! Every grid loss is normalized by the number of map cells, so terms
//! stay comparable across images of one resolution but their scale shrinks
//! with the grid size.

use rayon::prelude::*;

use crate::domain::Grid;
use crate::error::{Error, Result};
use crate::matcher::{solve, CostMatrix};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda_point: f64,
    pub lambda_quant: f64,
    pub lambda_offset: f64,
    pub lambda_aux: f64,
    /// Transition point of SmoothL1, in map cells.
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 4.0,
            lambda_point: 1.0,
            lambda_quant: 1.0,
            lambda_offset: 0.5,
            lambda_aux: 1.0,
            smooth_l1_beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        let lambdas = [
            self.lambda_point,
            self.lambda_quant,
            self.lambda_offset,
            self.lambda_aux,
        ];
        if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        if !(self.smooth_l1_beta > 0.0) {
            return Err(Error::Config("smooth_l1_beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport<G> {
    pub value: f64,
    pub grad: G,
}

/// Per-keypoint adjacency offsets, in map cells.
pub type OffsetSets = Vec<Vec<[f64; 2]>>;

/// Focal loss value and derivative for one cell, evaluated at the clamped prediction.
#[inline]
fn focal_cell(pred: f64, target: f64, alpha: f64, beta: f64) -> (f64, f64) {
    let p = pred.clamp(EPS, 1.0 - EPS);
    if target >= 1.0 {
        let one_m = 1.0 - p;
        let v = one_m.powf(alpha) * p.ln();
        let d = -alpha * one_m.powf(alpha - 1.0) * p.ln() + one_m.powf(alpha) / p;
        (-v, -d)
    } else {
        let w = (1.0 - target).powf(beta);
        let one_m = 1.0 - p;
        let v = w * p.powf(alpha) * one_m.ln();
        let d = w * (alpha * p.powf(alpha - 1.0) * one_m.ln() - p.powf(alpha) / one_m);
        (-v, -d)
    }
}

/// Penalty-reduced focal loss over a single-channel confidence grid.
pub fn focal_loss(pred: &Grid, target: &Grid, cfg: &LossConfig) -> Result<LossReport<Grid>> {
    pred.ensure_shape(target, "focal loss")?;
    let n = pred.spec().cells() as f64;
    let (values, grads): (Vec<f64>, Vec<f64>) = pred
        .data()
        .par_iter()
        .zip(target.data().par_iter())
        .map(|(&p, &t)| {
            let (v, d) = focal_cell(p, t, cfg.alpha, cfg.beta);
            (v, d / n)
        })
        .unzip();
    // Fixed-order serial reduction keeps the value reproducible.
    let value = values.iter().sum::<f64>() / n;
    Ok(LossReport {
        value,
        grad: Grid::from_vec(*pred.spec(), pred.channels(), grads)?,
    })
}

/// L1 over masked cells, summed over channels, normalized by the cell count.
pub fn masked_l1(pred: &Grid, target: &Grid, mask: &Grid) -> Result<LossReport<Grid>> {
    pred.ensure_shape(target, "masked L1")?;
    if mask.spec() != pred.spec() || mask.channels() != 1 {
        return Err(Error::ShapeMismatch("mask must be one channel on the same grid".into()));
    }
    let cells = pred.spec().cells();
    let n = cells as f64;
    let m = mask.data();
    let mut value = 0.0;
    let mut grad = vec![0.0; pred.data().len()];
    for (i, (&p, &t)) in pred.data().iter().zip(target.data()).enumerate() {
        if m[i % cells] <= 0.0 {
            continue;
        }
        let d = p - t;
        value += d.abs();
        grad[i] = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(LossReport {
        value: value / n,
        grad: Grid::from_vec(*pred.spec(), pred.channels(), grad)?,
    })
}

#[inline]
fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Hungarian-matched SmoothL1 between predicted and ground-truth adjacency
/// offsets. The assignment is held constant when differentiating; unmatched
/// predictions and ground truths contribute nothing.
pub fn aux_loss(
    pred_offsets: &[Vec<[f64; 2]>],
    gt_offsets: &[Vec<[f64; 2]>],
    cfg: &LossConfig,
) -> Result<LossReport<OffsetSets>> {
    if pred_offsets.len() != gt_offsets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction sets for {} keypoints",
            pred_offsets.len(),
            gt_offsets.len()
        )));
    }
    if pred_offsets.is_empty() {
        return Err(Error::ShapeMismatch("no keypoints to supervise".into()));
    }
    let total_preds: usize = pred_offsets.iter().map(Vec::len).sum();
    let per_keypoint = pred_offsets
        .par_iter()
        .zip(gt_offsets.par_iter())
        .map(|(preds, gts)| -> Result<(f64, Vec<[f64; 2]>)> {
            if preds.is_empty() || gts.is_empty() {
                return Err(Error::ShapeMismatch(
                    "every keypoint needs at least one prediction and one ground truth".into(),
                ));
            }
            let assignment = solve(&CostMatrix::l2(preds, gts)?);
            let mut value = 0.0;
            let mut grad = vec![[0.0; 2]; preds.len()];
            for (m, k) in assignment.pairs {
                for c in 0..2 {
                    let (v, d) = smooth_l1(preds[m][c] - gts[k][c], cfg.smooth_l1_beta);
                    value += v;
                    grad[m][c] = d;
                }
            }
            Ok((value, grad))
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = total_preds as f64;
    let value = per_keypoint.iter().map(|(v, _)| v).sum::<f64>() / norm;
    let grad = per_keypoint
        .into_iter()
        .map(|(_, g)| g.into_iter().map(|[a, b]| [a / norm, b / norm]).collect())
        .collect();
    Ok(LossReport { value, grad })
}

/// Predictions fed to the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct Predictions<'a> {
    pub confidence: &'a Grid,
    pub quant: &'a Grid,
    pub offsets: &'a Grid,
    pub adjacency: &'a [Vec<[f64; 2]>],
}

/// Ground truth fed to the combined loss.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub confidence: &'a Grid,
    pub quant: &'a Grid,
    pub offsets: &'a Grid,
    pub mask: &'a Grid,
    pub adjacency: &'a [Vec<[f64; 2]>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub value: f64,
    pub point: f64,
    pub quant: f64,
    pub offset: f64,
    pub aux: f64,
    pub grad_confidence: Grid,
    pub grad_quant: Grid,
    pub grad_offsets: Grid,
    pub grad_adjacency: OffsetSets,
}

impl TotalLoss {
    pub fn grad_norm(&self) -> f64 {
        let aux: f64 = self.grad_adjacency.iter().flatten().map(|[a, b]| a * a + b * b).sum();
        (self.grad_confidence.norm_sq() + self.grad_quant.norm_sq() + self.grad_offsets.norm_sq() + aux).sqrt()
    }
}

/// Weighted sum of the four terms. A keypoint set with no entries makes the
/// auxiliary term zero rather than an error.
pub fn total_loss(pred: Predictions<'_>, gt: Supervision<'_>, cfg: &LossConfig) -> Result<TotalLoss> {
    cfg.validate()?;
    let point = focal_loss(pred.confidence, gt.confidence, cfg)?;
    let quant = masked_l1(pred.quant, gt.quant, gt.mask)?;
    let offset = masked_l1(pred.offsets, gt.offsets, gt.mask)?;
    let aux = if gt.adjacency.is_empty() && pred.adjacency.is_empty() {
        LossReport {
            value: 0.0,
            grad: Vec::new(),
        }
    } else {
        aux_loss(pred.adjacency, gt.adjacency, cfg)?
    };

    let mut grad_confidence = point.grad;
    grad_confidence.scale(cfg.lambda_point);
    let mut grad_quant = quant.grad;
    grad_quant.scale(cfg.lambda_quant);
    let mut grad_offsets = offset.grad;
    grad_offsets.scale(cfg.lambda_offset);
    let grad_adjacency = aux
        .grad
        .into_iter()
        .map(|g| {
            g.into_iter()
                .map(|[a, b]| [a * cfg.lambda_aux, b * cfg.lambda_aux])
                .collect()
        })
        .collect();

    let value = cfg.lambda_point * point.value
        + cfg.lambda_quant * quant.value
        + cfg.lambda_offset * offset.value
        + cfg.lambda_aux * aux.value;
    if !value.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(TotalLoss {
        value,
        point: point.value,
        quant: quant.value,
        offset: offset.value,
        aux: aux.value,
        grad_confidence,
        grad_quant,
        grad_offsets,
        grad_adjacency,
    })
}
