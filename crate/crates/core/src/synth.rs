//! Seeded synthetic lane scenes and target corruption.
//!
//! Lanes are curves `x(t) = c + b t + a t^2 + d t^3` with `t = y_bottom - y`,
//! so every lane is a function of the row and never folds back on itself.

use crate::decoder::DecodedLaneSet;
use crate::domain::{Grid, Keypoint, Lane, LaneSet, Scene};
use crate::encoder::Targets;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CurveFamily {
    Straight,
    Quadratic,
    /// Cubic in `t`: curvature that changes linearly along the lane.
    Clothoid,
}

impl std::str::FromStr for CurveFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "straight" => Ok(Self::Straight),
            "quadratic" => Ok(Self::Quadratic),
            "clothoid" => Ok(Self::Clothoid),
            other => Err(Error::Config(format!("unknown curve family {other:?}"))),
        }
    }
}

/// A lane centerline as a function of the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curve {
    pub bottom: f64,
    pub top: f64,
    /// `[c, b, a, d]`: constant, linear, quadratic and cubic coefficients in `t`.
    pub coeffs: [f64; 4],
}

impl Curve {
    pub fn x_at(&self, y: f64) -> f64 {
        let t = self.bottom - y;
        let [c, b, a, d] = self.coeffs;
        c + t * (b + t * (a + t * d))
    }

    /// `k` points at evenly spaced rows from bottom to top.
    pub fn sample(&self, k: usize) -> Result<Lane> {
        let pts = (0..k)
            .map(|j| {
                let y = if j == k - 1 {
                    self.top
                } else {
                    self.bottom + (self.top - self.bottom) * j as f64 / (k - 1) as f64
                };
                Keypoint::new(self.x_at(y), y)
            })
            .collect();
        Lane::new(pts)
    }

    /// Dense per-row polyline: one point on every integer row of the span.
    pub fn dense_polyline(&self) -> Vec<Keypoint> {
        rasterize_rows(self)
            .into_iter()
            .map(|(row, x)| Keypoint::new(x, row as f64))
            .collect()
    }
}

/// Brute-force per-row rasterization: `(row, x)` on every integer row from
/// the bottom of the curve to its top.
pub fn rasterize_rows(curve: &Curve) -> Vec<(i64, f64)> {
    let (b, t) = (curve.bottom.floor() as i64, curve.top.ceil() as i64);
    (t..=b).rev().map(|row| (row, curve.x_at(row as f64))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_lanes: usize,
    pub family: CurveFamily,
    /// Range of the linear coefficient (pixels of x per pixel of rise).
    pub slope_range: (f64, f64),
    pub curvature_range: (f64, f64),
    pub cubic_range: (f64, f64),
    /// Interval the starting x positions are drawn from.
    pub start_x_range: (f64, f64),
    /// Integer row ranges for lane bottoms and tops.
    pub bottom_range: (usize, usize),
    pub top_range: (usize, usize),
    /// Minimum distance between two starting points, in pixels.
    pub min_start_separation: f64,
    /// Minimum horizontal gap between two lanes on any shared row, in pixels.
    pub min_row_gap: f64,
    pub points_per_lane: usize,
    pub seed: u64,
}

impl SceneSpec {
    /// 800x320 scene with up to six well separated lanes.
    pub fn standard(num_lanes: usize, seed: u64) -> Self {
        Self {
            width: 800,
            height: 320,
            num_lanes,
            family: CurveFamily::Quadratic,
            slope_range: (-0.5, 0.5),
            curvature_range: (-0.0012, 0.0012),
            cubic_range: (-3e-6, 3e-6),
            start_x_range: (16.0, 784.0),
            bottom_range: (280, 318),
            top_range: (90, 150),
            min_start_separation: 80.0,
            min_row_gap: 48.0,
            points_per_lane: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            self.slope_range,
            self.curvature_range,
            self.cubic_range,
            self.start_x_range,
        ];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::Config("every range must satisfy lo <= hi".into()));
        }
        if self.bottom_range.0 > self.bottom_range.1 || self.top_range.0 > self.top_range.1 {
            return Err(Error::Config("row ranges must satisfy lo <= hi".into()));
        }
        if self.top_range.1 >= self.bottom_range.0 {
            return Err(Error::Config("lane tops must lie above lane bottoms".into()));
        }
        if self.bottom_range.1 >= self.height {
            return Err(Error::Config("lane bottoms must lie inside the image".into()));
        }
        if self.points_per_lane < 2 {
            return Err(Error::Config("points_per_lane must be at least 2".into()));
        }
        if self.start_x_range.0 < 0.0 || self.start_x_range.1 >= self.width as f64 {
            return Err(Error::Config("start_x_range must lie inside the image".into()));
        }
        Ok(())
    }
}

fn draw(rng: &mut SplitMix64, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.uniform(lo, hi)
    }
}

fn draw_row(rng: &mut SplitMix64, (lo, hi): (usize, usize)) -> f64 {
    (lo + rng.below((hi - lo + 1) as u64) as usize) as f64
}

fn curves_fit(curves: &[Curve], spec: &SceneSpec) -> bool {
    let w = spec.width as f64;
    for c in curves {
        if rasterize_rows(c).iter().any(|&(_, x)| !(x >= 0.0 && x < w)) {
            return false;
        }
    }
    for (i, a) in curves.iter().enumerate() {
        for b in &curves[i + 1..] {
            let start_a = Keypoint::new(a.x_at(a.bottom), a.bottom);
            let start_b = Keypoint::new(b.x_at(b.bottom), b.bottom);
            if start_a.distance(&start_b) < spec.min_start_separation {
                return false;
            }
            let lo = a.top.max(b.top).ceil() as i64;
            let hi = a.bottom.min(b.bottom).floor() as i64;
            if (lo..=hi).any(|row| (a.x_at(row as f64) - b.x_at(row as f64)).abs() < spec.min_row_gap) {
                return false;
            }
        }
    }
    true
}

/// Curves of one scene, before sampling.
pub fn generate_curves(spec: &SceneSpec) -> Result<Vec<Curve>> {
    spec.validate()?;
    let n = spec.num_lanes;
    if n == 0 {
        return Ok(Vec::new());
    }
    let (x_lo, x_hi) = spec.start_x_range;
    let slack = (x_hi - x_lo) - (n - 1) as f64 * spec.min_start_separation;
    if slack < 0.0 {
        return Err(Error::Infeasible(format!(
            "{n} lanes {} px apart do not fit in [{x_lo}, {x_hi}]",
            spec.min_start_separation
        )));
    }
    let mut rng = SplitMix64::new(spec.seed);
    for _ in 0..MAX_ATTEMPTS {
        // Sorted uniform gaps keep consecutive starts min_start_separation apart.
        let mut gaps: Vec<f64> = (0..n).map(|_| draw(&mut rng, (0.0, slack))).collect();
        gaps.sort_by(f64::total_cmp);
        let curves: Vec<Curve> = gaps
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let c = x_lo + g + i as f64 * spec.min_start_separation;
                let bottom = draw_row(&mut rng, spec.bottom_range);
                let top = draw_row(&mut rng, spec.top_range);
                let b = draw(&mut rng, spec.slope_range);
                let a = match spec.family {
                    CurveFamily::Straight => 0.0,
                    _ => draw(&mut rng, spec.curvature_range),
                };
                let d = match spec.family {
                    CurveFamily::Clothoid => draw(&mut rng, spec.cubic_range),
                    _ => 0.0,
                };
                Curve {
                    bottom,
                    top,
                    coeffs: [c, b, a, d],
                }
            })
            .collect();
        if curves_fit(&curves, spec) {
            return Ok(curves);
        }
    }
    Err(Error::Infeasible(format!(
        "no valid {n}-lane layout found in {MAX_ATTEMPTS} attempts"
    )))
}

/// Deterministic scene for `spec.seed`; lanes are sampled with
/// `points_per_lane` keypoints each.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    let lanes = generate_curves(spec)?
        .iter()
        .map(|c| c.sample(spec.points_per_lane))
        .collect::<Result<Vec<_>>>()?;
    Scene::new(spec.width, spec.height, LaneSet::new(lanes))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Corruption {
    /// Std of additive noise on every confidence cell (result clamped to [0, 1]).
    pub confidence_noise: f64,
    /// Std of additive noise on masked offset vectors, in map cells.
    pub offset_noise: f64,
    /// Probability of removing each keypoint.
    pub dropout: f64,
    /// Probability of turning an unmasked cell into a full-confidence peak.
    pub false_peak_rate: f64,
}

impl Corruption {
    pub fn offsets(scale: f64) -> Self {
        Self {
            offset_noise: scale,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.confidence_noise,
            self.offset_noise,
            self.dropout,
            self.false_peak_rate,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "corruption parameters must be finite and nonnegative".into(),
            ));
        }
        if self.dropout > 1.0 || self.false_peak_rate > 1.0 {
            return Err(Error::Config("probabilities must not exceed 1".into()));
        }
        Ok(())
    }
}

fn clear_cell(g: &mut Grid, row: usize, col: usize) {
    for c in 0..g.channels() {
        g.set(c, row, col, 0.0);
    }
}

/// Applies, in order: keypoint dropout, offset noise, confidence noise and
/// false peaks. Deterministic for a given seed.
pub fn corrupt(t: &Targets, c: &Corruption, seed: u64) -> Result<Targets> {
    c.validate()?;
    let mut out = t.clone();
    let mut rng = SplitMix64::new(seed);

    if c.dropout > 0.0 {
        let mut kept = Vec::with_capacity(out.adjacency.len());
        for a in std::mem::take(&mut out.adjacency) {
            if rng.bernoulli(c.dropout) {
                let (col, row) = a.cell;
                clear_cell(&mut out.mask, row, col);
                clear_cell(&mut out.quant, row, col);
                clear_cell(&mut out.offsets, row, col);
                clear_cell(&mut out.confidence, row, col);
            } else {
                kept.push(a);
            }
        }
        out.adjacency = kept;
    }

    if c.offset_noise > 0.0 {
        for a in &out.adjacency {
            let (col, row) = a.cell;
            for ch in 0..2 {
                let v = out.offsets.get(ch, row, col) + c.offset_noise * rng.normal();
                out.offsets.set(ch, row, col, v);
            }
        }
    }

    if c.confidence_noise > 0.0 {
        for v in out.confidence.data_mut() {
            *v = (*v + c.confidence_noise * rng.normal()).clamp(0.0, 1.0);
        }
    }

    if c.false_peak_rate > 0.0 {
        let mask = out.mask.data().to_vec();
        for (v, m) in out.confidence.data_mut().iter_mut().zip(mask) {
            if m <= 0.0 && rng.bernoulli(c.false_peak_rate) {
                *v = 1.0;
            }
        }
    }
    Ok(out)
}

/// Fraction bookkeeping for association experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AssociationScore {
    pub correct: usize,
    pub total: usize,
}

impl AssociationScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Counts ground-truth keypoints that end up in the decoded lane whose
/// starting point lies within `theta_dis` cells of the true one. A point
/// counts when the decoded lane holds a point within half a cell of it.
pub fn association_score(gt: &LaneSet, decoded: &DecodedLaneSet, stride: usize, theta_dis: f64) -> AssociationScore {
    let r = stride as f64;
    let mut score = AssociationScore::default();
    for lane in &gt.lanes {
        score.total += lane.len();
        let start = lane.start();
        let Some(found) = decoded
            .lanes
            .iter()
            .map(|d| (d, d.lane.start().distance(&start)))
            .filter(|(_, dist)| *dist < theta_dis * r)
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(d, _)| d)
        else {
            continue;
        };
        score.correct += lane
            .points()
            .iter()
            .filter(|p| found.lane.points().iter().any(|q| q.distance(p) <= 0.5 * r))
            .count();
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{decode, AssociationMode, DecoderConfig};
    use crate::domain::GridSpec;
    use crate::encoder::{encode, sample_lane, EncoderConfig};

    #[test]
    fn vertical_lane() {
        let spec = SceneSpec {
            num_lanes: 1,
            family: CurveFamily::Straight,
            slope_range: (0.0, 0.0),
            start_x_range: (100.0, 100.0),
            ..SceneSpec::standard(1, 3)
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.lanes.len(), 1);
        assert!(s.lanes.lanes[0].points().iter().all(|p| p.x == 100.0));
    }

    #[test]
    fn deterministic() {
        let spec = SceneSpec::standard(4, 42);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SceneSpec::standard(4, 43);
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn start_spacing_respected() {
        for seed in 0..50 {
            let spec = SceneSpec {
                min_start_separation: 80.0,
                ..SceneSpec::standard(4, seed)
            };
            let s = generate(&spec).unwrap();
            let starts: Vec<Keypoint> = s.lanes.lanes.iter().map(Lane::start).collect();
            for i in 0..starts.len() {
                for j in i + 1..starts.len() {
                    assert!(starts[i].distance(&starts[j]) >= 80.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_spacing() {
        let spec = SceneSpec {
            min_start_separation: 300.0,
            ..SceneSpec::standard(4, 1)
        };
        assert!(matches!(generate(&spec), Err(Error::Infeasible(_))));
    }

    #[test]
    fn sampling_matches_dense_rasterization() {
        let curve = Curve {
            bottom: 310.0,
            top: 100.0,
            coeffs: [200.0, 0.3, 0.0011, 0.0],
        };
        let lane = sample_lane(&curve.dense_polyline(), 8).unwrap();
        let raster = rasterize_rows(&curve);
        for p in lane.points() {
            let row = p.y.round() as i64;
            let (_, x) = raster.iter().find(|(r, _)| *r == row).unwrap();
            let pixel_center = x.floor() + 0.5;
            assert!((p.x - pixel_center).abs() <= 0.5, "{} vs {}", p.x, pixel_center);
        }
    }

    fn standard_targets(seed: u64) -> (Scene, Targets) {
        let scene = generate(&SceneSpec::standard(4, seed)).unwrap();
        let spec = GridSpec::new(scene.width, scene.height, 8).unwrap();
        let t = encode(&scene.lanes, &spec, &EncoderConfig::default()).unwrap();
        (scene, t)
    }

    #[test]
    fn zero_corruption_is_identity() {
        let (_, t) = standard_targets(5);
        assert_eq!(corrupt(&t, &Corruption::default(), 9).unwrap(), t);
    }

    #[test]
    fn full_dropout_empties_everything() {
        let (_, t) = standard_targets(5);
        let c = Corruption {
            dropout: 1.0,
            ..Default::default()
        };
        let out = corrupt(&t, &c, 1).unwrap();
        assert_eq!(out.masked_cells(), 0);
        assert!(out.adjacency.is_empty());
        let d = decode(
            &out.confidence,
            &out.quant,
            &out.offsets,
            &DecoderConfig::default(),
            AssociationMode::Parallel,
        )
        .unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn corruption_deterministic() {
        let (_, t) = standard_targets(6);
        let c = Corruption {
            confidence_noise: 0.05,
            offset_noise: 0.3,
            dropout: 0.1,
            false_peak_rate: 0.001,
        };
        assert_eq!(corrupt(&t, &c, 77).unwrap(), corrupt(&t, &c, 77).unwrap());
        assert_ne!(corrupt(&t, &c, 77).unwrap(), corrupt(&t, &c, 78).unwrap());
    }

    #[test]
    fn small_offset_noise_keeps_association() {
        let cfg = DecoderConfig::default();
        let mut total = AssociationScore::default();
        for seed in 0..100 {
            let (scene, t) = standard_targets(seed);
            let noisy = corrupt(&t, &Corruption::offsets(0.1), 1000 + seed).unwrap();
            let d = decode(
                &noisy.confidence,
                &noisy.quant,
                &noisy.offsets,
                &cfg,
                AssociationMode::Parallel,
            )
            .unwrap();
            let s = association_score(&scene.lanes, &d, 8, cfg.theta_dis);
            total.correct += s.correct;
            total.total += s.total;
        }
        assert!(total.accuracy() >= 0.99, "accuracy {}", total.accuracy());
    }
}
