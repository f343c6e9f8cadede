//! Direct gradient descent of the combined loss over raw prediction maps.
//!
//! No network is involved: the confidence logits, quantization map, offset
//! map and per-keypoint adjacency predictions are free parameters. The
//! confidence map is `sigmoid(logits)`, which keeps it inside (0, 1).
//!
//! Each loss term is a mean over its elements, so the raw gradient of a
//! single element shrinks with the element count. The step applied to a
//! parameter group is `lr_t * count * grad`, which makes `lr` a per-element
//! step size. `lr_t` follows a polynomial decay `lr * (1 - t / T)^power`.

use crate::decoder::{decode, AssociationMode, DecodedLaneSet, DecoderConfig};
use crate::domain::Grid;
use crate::encoder::Targets;
use crate::error::{Error, Result};
use crate::lfa::DEFAULT_SAMPLES;
use crate::losses::{total_loss, LossConfig, OffsetSets, Predictions, Supervision, TotalLoss, EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FitInit {
    /// Confidence 0.1 everywhere, zero quant, offsets and adjacency predictions.
    #[default]
    Default,
    /// Start at the ground truth (confidence clamped to `[EPS, 1 - EPS]`).
    Targets,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub lr: f64,
    pub iterations: usize,
    pub loss: LossConfig,
    /// Loss rows are logged every `log_every` iterations.
    pub log_every: usize,
    /// Adjacency predictions per keypoint (M).
    pub samples: usize,
    pub decay_power: f64,
    pub init: FitInit,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            iterations: 2000,
            loss: LossConfig::default(),
            log_every: 50,
            samples: DEFAULT_SAMPLES,
            decay_power: 0.9,
            init: FitInit::Default,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if !(self.decay_power >= 0.0) {
            return Err(Error::Config("decay_power must be nonnegative".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr
            * (1.0 - t as f64 / self.iterations as f64)
                .max(0.0)
                .powf(self.decay_power)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitRecord {
    pub iteration: usize,
    pub total: f64,
    pub point: f64,
    pub quant: f64,
    pub offset: f64,
    pub aux: f64,
    pub grad_norm: f64,
}

impl FitRecord {
    fn new(iteration: usize, l: &TotalLoss) -> Self {
        Self {
            iteration,
            total: l.value,
            point: l.point,
            quant: l.quant,
            offset: l.offset,
            aux: l.aux,
            grad_norm: l.grad_norm(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub confidence: Grid,
    pub quant: Grid,
    pub offsets: Grid,
    pub adjacency: OffsetSets,
    /// One record per evaluated iteration, `0..=iterations`.
    pub history: Vec<FitRecord>,
    pub decoded: DecodedLaneSet,
}

impl FitOutcome {
    /// CSV of the history rows at the logging cadence (the last row is always kept).
    pub fn loss_csv(&self, log_every: usize) -> String {
        let mut s = String::from("iteration,total,point,quant,offset,aux,grad_norm\n");
        let last = self.history.len().saturating_sub(1);
        for (i, r) in self.history.iter().enumerate() {
            if i % log_every.max(1) == 0 || i == last {
                s.push_str(&format!(
                    "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                    r.iteration, r.total, r.point, r.quant, r.offset, r.aux, r.grad_norm
                ));
            }
        }
        s
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn probabilities(logits: &Grid) -> Grid {
    let mut g = logits.clone();
    g.data_mut().iter_mut().for_each(|z| *z = sigmoid(*z));
    g
}

pub fn fit(targets: &Targets, cfg: &FitConfig, decoder: &DecoderConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    let m = cfg.samples;
    let gt_adj: OffsetSets = targets.adjacency.iter().map(|a| a.offsets.clone()).collect();

    let (mut logits, mut quant, mut offsets, mut adjacency) = match cfg.init {
        FitInit::Default => (
            Grid::filled(targets.spec, 1, logit(0.1)),
            Grid::zeros(targets.spec, 2),
            Grid::zeros(targets.spec, 2),
            vec![vec![[0.0; 2]; m]; gt_adj.len()],
        ),
        FitInit::Targets => {
            let mut z = targets.confidence.clone();
            z.data_mut()
                .iter_mut()
                .for_each(|v| *v = logit(v.clamp(EPS, 1.0 - EPS)));
            let adj = gt_adj
                .iter()
                .map(|g| (0..m).map(|i| g[i.min(g.len() - 1)]).collect())
                .collect();
            (z, targets.quant.clone(), targets.offsets.clone(), adj)
        }
    };

    let cells = targets.spec.cells() as f64;
    let preds_total = (m * gt_adj.len()) as f64;
    let mut history = Vec::with_capacity(cfg.iterations + 1);

    for t in 0..=cfg.iterations {
        let conf = probabilities(&logits);
        let loss = total_loss(
            Predictions {
                confidence: &conf,
                quant: &quant,
                offsets: &offsets,
                adjacency: &adjacency,
            },
            Supervision {
                confidence: &targets.confidence,
                quant: &targets.quant,
                offsets: &targets.offsets,
                mask: &targets.mask,
                adjacency: &gt_adj,
            },
            &cfg.loss,
        )
        .map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(format!(
                "loss diverged at iteration {t}; last finite iteration {}",
                t.saturating_sub(1)
            )),
            other => other,
        })?;
        history.push(FitRecord::new(t, &loss));
        if t == cfg.iterations {
            break;
        }

        let lr = cfg.lr_at(t);
        let step = lr * cells;
        for ((z, g), p) in logits
            .data_mut()
            .iter_mut()
            .zip(loss.grad_confidence.data())
            .zip(conf.data())
        {
            *z -= step * g * p * (1.0 - p);
        }
        for (q, g) in quant.data_mut().iter_mut().zip(loss.grad_quant.data()) {
            *q -= step * g;
        }
        for (o, g) in offsets.data_mut().iter_mut().zip(loss.grad_offsets.data()) {
            *o -= step * g;
        }
        let aux_step = lr * preds_total;
        for (set, grads) in adjacency.iter_mut().zip(&loss.grad_adjacency) {
            for (v, g) in set.iter_mut().zip(grads) {
                v[0] -= aux_step * g[0];
                v[1] -= aux_step * g[1];
            }
        }
    }

    let confidence = probabilities(&logits);
    let decoded = decode(&confidence, &quant, &offsets, decoder, AssociationMode::Parallel)?;
    Ok(FitOutcome {
        confidence,
        quant,
        offsets,
        adjacency,
        history,
        decoded,
    })
}
