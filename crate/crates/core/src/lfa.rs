//! Lane-aware feature aggregation: a deformable gather along a lane.
//!
//! Each keypoint samples the feature map at `M` positions `anchor + offset_m`
//! using bilinear interpolation and sums the samples with weights `w_m`.
//! One offset set is shared across all feature channels. Positions outside
//! the grid are clamped to the border cells.

use crate::domain::Grid;
use crate::error::{Error, Result};

/// Default number of sampled adjacent points.
pub const DEFAULT_SAMPLES: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Keypoint position `[x, y]` in map cells.
    pub anchor: [f64; 2],
    pub offsets: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

impl SampleSet {
    pub fn new(anchor: [f64; 2], offsets: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::Config("a sample set needs at least one offset".into()));
        }
        if offsets.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets but {} weights",
                offsets.len(),
                weights.len()
            )));
        }
        let finite = anchor
            .iter()
            .chain(offsets.iter().flatten())
            .chain(&weights)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("sample set".into()));
        }
        Ok(Self {
            anchor,
            offsets,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    fn position(&self, m: usize) -> [f64; 2] {
        [self.anchor[0] + self.offsets[m][0], self.anchor[1] + self.offsets[m][1]]
    }
}

/// The four interpolation corners of one sample and the position gradient
/// mask (zero along a clamped axis).
#[derive(Debug, Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    live_x: bool,
    live_y: bool,
}

fn axis(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let hi = (n - 1) as f64;
    let live = (0.0..=hi).contains(&v);
    let c = v.clamp(0.0, hi);
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, live)
}

fn tap(f: &Grid, pos: [f64; 2]) -> Tap {
    let (x0, x1, fx, live_x) = axis(pos[0], f.width());
    let (y0, y1, fy, live_y) = axis(pos[1], f.height());
    Tap {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        live_x,
        live_y,
    }
}

impl Tap {
    fn corners(&self) -> [(usize, usize, f64); 4] {
        let (fx, fy) = (self.fx, self.fy);
        [
            (self.y0, self.x0, (1.0 - fx) * (1.0 - fy)),
            (self.y0, self.x1, fx * (1.0 - fy)),
            (self.y1, self.x0, (1.0 - fx) * fy),
            (self.y1, self.x1, fx * fy),
        ]
    }

    fn sample(&self, f: &Grid, c: usize) -> f64 {
        self.corners().iter().map(|&(r, col, w)| w * f.get(c, r, col)).sum()
    }

    /// d(sample)/dx and d(sample)/dy for channel `c`.
    fn position_grad(&self, f: &Grid, c: usize) -> [f64; 2] {
        let (a, b) = (f.get(c, self.y0, self.x0), f.get(c, self.y0, self.x1));
        let (d, e) = (f.get(c, self.y1, self.x0), f.get(c, self.y1, self.x1));
        let gx = if self.live_x {
            (1.0 - self.fy) * (b - a) + self.fy * (e - d)
        } else {
            0.0
        };
        let gy = if self.live_y {
            (1.0 - self.fx) * (d - a) + self.fx * (e - b)
        } else {
            0.0
        };
        [gx, gy]
    }
}

/// Bilinear sample of every channel at `pos = [x, y]` (map cells).
pub fn bilinear(f: &Grid, pos: [f64; 2]) -> Vec<f64> {
    let t = tap(f, pos);
    (0..f.channels()).map(|c| t.sample(f, c)).collect()
}

/// `sum_m w_m * F(anchor + offset_m)` for every channel.
pub fn aggregate(f: &Grid, s: &SampleSet) -> Vec<f64> {
    let mut out = vec![0.0; f.channels()];
    for m in 0..s.len() {
        let t = tap(f, s.position(m));
        for (c, o) in out.iter_mut().enumerate() {
            *o += s.weights[m] * t.sample(f, c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateGrad {
    pub features: Grid,
    pub offsets: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
}

/// Backward pass of [`aggregate`] for an upstream gradient over channels.
pub fn aggregate_grad(f: &Grid, s: &SampleSet, upstream: &[f64]) -> Result<AggregateGrad> {
    if upstream.len() != f.channels() {
        return Err(Error::ShapeMismatch(format!(
            "upstream has {} channels, features have {}",
            upstream.len(),
            f.channels()
        )));
    }
    let mut features = Grid::zeros(*f.spec(), f.channels());
    let mut offsets = vec![[0.0; 2]; s.len()];
    let mut weights = vec![0.0; s.len()];
    for m in 0..s.len() {
        let t = tap(f, s.position(m));
        let w = s.weights[m];
        for (c, &up) in upstream.iter().enumerate() {
            weights[m] += up * t.sample(f, c);
            let [gx, gy] = t.position_grad(f, c);
            offsets[m][0] += w * up * gx;
            offsets[m][1] += w * up * gy;
            for (r, col, k) in t.corners() {
                let i = features.index(c, r, col);
                features.data_mut()[i] += w * up * k;
            }
        }
    }
    Ok(AggregateGrad {
        features,
        offsets,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GridSpec;
    use crate::rng::SplitMix64;

    fn grid(w: usize, h: usize, c: usize, f: impl Fn(usize, usize, usize) -> f64) -> Grid {
        let spec = GridSpec::new(w, h, 1).unwrap();
        let mut g = Grid::zeros(spec, c);
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    g.set(ch, r, col, f(ch, r, col));
                }
            }
        }
        g
    }

    /// Independent reference: every cell weighted by the tent kernel of the
    /// clamped position.
    fn tent_sample(f: &Grid, pos: [f64; 2], c: usize) -> f64 {
        let x = pos[0].clamp(0.0, (f.width() - 1) as f64);
        let y = pos[1].clamp(0.0, (f.height() - 1) as f64);
        let mut acc = 0.0;
        for r in 0..f.height() {
            for col in 0..f.width() {
                let k = (1.0 - (x - col as f64).abs()).max(0.0) * (1.0 - (y - r as f64).abs()).max(0.0);
                acc += k * f.get(c, r, col);
            }
        }
        acc
    }

    #[test]
    fn constant_grid() {
        let g = grid(5, 4, 2, |c, _, _| 3.0 + c as f64);
        assert_eq!(bilinear(&g, [1.3, 2.7]), vec![3.0, 4.0]);
        assert_eq!(bilinear(&g, [-10.0, 99.0]), vec![3.0, 4.0]);
    }

    #[test]
    fn integer_and_midpoint() {
        let g = grid(4, 3, 1, |_, r, c| (10 * r + c) as f64);
        assert_eq!(bilinear(&g, [2.0, 1.0]), vec![12.0]);
        assert_eq!(bilinear(&g, [3.0, 2.0]), vec![23.0]);
        let two_four = grid(2, 1, 1, |_, _, c| if c == 0 { 2.0 } else { 4.0 });
        assert_eq!(bilinear(&two_four, [0.5, 0.0]), vec![3.0]);
    }

    #[test]
    fn convex_identity_and_single_tap() {
        let g = grid(6, 6, 1, |_, r, c| (r * r + 3 * c) as f64);
        let s = SampleSet::new([2.0, 3.0], vec![[0.0, 0.0]; 4], vec![0.25; 4]).unwrap();
        assert!((aggregate(&g, &s)[0] - g.get(0, 3, 2)).abs() < 1e-12);
        let s = SampleSet::new([2.0, 3.0], vec![[1.0, -1.0]], vec![2.0]).unwrap();
        assert_eq!(aggregate(&g, &s), vec![2.0 * g.get(0, 2, 3)]);
    }

    #[test]
    fn matches_tent_oracle() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..20 {
            let g = grid(6, 6, 3, |_, _, _| 0.0);
            let mut g = g;
            g.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
            let anchor = [rng.uniform(0.0, 5.0), rng.uniform(0.0, 5.0)];
            let offsets: Vec<[f64; 2]> = (0..9)
                .map(|_| [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)])
                .collect();
            let weights: Vec<f64> = (0..9).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let s = SampleSet::new(anchor, offsets.clone(), weights.clone()).unwrap();
            let got = aggregate(&g, &s);
            for (c, v) in got.iter().enumerate() {
                let want: f64 = (0..9)
                    .map(|m| weights[m] * tent_sample(&g, [anchor[0] + offsets[m][0], anchor[1] + offsets[m][1]], c))
                    .sum();
                assert!((v - want).abs() < 1e-12, "{v} vs {want}");
            }
        }
    }

    #[test]
    fn flat_landscape_has_no_offset_gradient() {
        let g = grid(5, 5, 2, |c, _, _| 1.5 * c as f64 + 1.0);
        let s = SampleSet::new([2.2, 2.1], vec![[0.3, -0.7], [1.1, 0.4]], vec![0.5, -2.0]).unwrap();
        let gr = aggregate_grad(&g, &s, &[1.0, -0.5]).unwrap();
        assert!(gr.offsets.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn weight_gradient_is_sample() {
        let g = grid(5, 5, 2, |c, r, col| (c + 1) as f64 * (r as f64 - 0.3 * col as f64));
        let s = SampleSet::new([2.2, 2.1], vec![[0.3, -0.7], [1.1, 0.4]], vec![0.5, -2.0]).unwrap();
        let up = [0.7, -1.3];
        let gr = aggregate_grad(&g, &s, &up).unwrap();
        for m in 0..2 {
            let b = bilinear(&g, s.position(m));
            let want = b[0] * up[0] + b[1] * up[1];
            assert!((gr.weights[m] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_features_and_weights() {
        let mut rng = SplitMix64::new(4);
        let mut a = grid(6, 5, 2, |_, _, _| 0.0);
        let mut b = a.clone();
        a.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        b.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        let mut sum = a.clone();
        sum.data_mut()
            .iter_mut()
            .zip(b.data())
            .for_each(|(x, y)| *x = 2.0 * *x + y);
        let offsets = vec![[0.4, 0.9], [-1.2, 0.3], [2.5, -1.5]];
        let s = SampleSet::new([2.5, 2.0], offsets.clone(), vec![0.3, -0.6, 1.1]).unwrap();
        let lhs = aggregate(&sum, &s);
        let (fa, fb) = (aggregate(&a, &s), aggregate(&b, &s));
        for c in 0..2 {
            assert!((lhs[c] - (2.0 * fa[c] + fb[c])).abs() < 1e-12);
        }
        let s1 = SampleSet::new([2.5, 2.0], offsets.clone(), vec![1.0, 0.0, 2.0]).unwrap();
        let s2 = SampleSet::new([2.5, 2.0], offsets.clone(), vec![0.5, 3.0, -1.0]).unwrap();
        let s12 = SampleSet::new([2.5, 2.0], offsets, vec![1.5, 3.0, 1.0]).unwrap();
        let (x, y, z) = (aggregate(&a, &s1), aggregate(&a, &s2), aggregate(&a, &s12));
        for c in 0..2 {
            assert!((z[c] - x[c] - y[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = SplitMix64::new(8);
        let base: Vec<f64> = (0..12 * 12).map(|_| rng.normal()).collect();
        let g = grid(12, 12, 1, |_, r, c| base[r * 12 + c]);
        let (sx, sy) = (2usize, 3usize);
        let shifted = grid(12, 12, 1, |_, r, c| {
            if r >= sy && c >= sx {
                base[(r - sy) * 12 + (c - sx)]
            } else {
                0.0
            }
        });
        let offsets = vec![[0.4, 0.9], [-1.2, 0.3], [1.5, -1.5]];
        let s = SampleSet::new([4.3, 4.6], offsets.clone(), vec![0.3, -0.6, 1.1]).unwrap();
        let t = SampleSet::new([4.3 + sx as f64, 4.6 + sy as f64], offsets, vec![0.3, -0.6, 1.1]).unwrap();
        assert!((aggregate(&g, &s)[0] - aggregate(&shifted, &t)[0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sets() {
        assert!(SampleSet::new([0.0, 0.0], vec![], vec![]).is_err());
        assert!(SampleSet::new([0.0, 0.0], vec![[0.0, 0.0]], vec![1.0, 2.0]).is_err());
        assert!(SampleSet::new([f64::NAN, 0.0], vec![[0.0, 0.0]], vec![1.0]).is_err());
        let g = grid(3, 3, 2, |_, _, _| 1.0);
        let s = SampleSet::new([1.0, 1.0], vec![[0.0, 0.0]], vec![1.0]).unwrap();
        assert!(aggregate_grad(&g, &s, &[1.0]).is_err());
    }
}
