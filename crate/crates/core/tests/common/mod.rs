#![allow(dead_code)]

use keylane::domain::{Grid, GridSpec, Lane, Scene};
use keylane::encoder::{encode, EncoderConfig, Targets};
use keylane::rng::SplitMix64;
use keylane::synth::{generate, SceneSpec};

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Worst relative error of `analytic` against central differences of `f`
/// over the coordinates selected by `check`.
pub fn grad_check(
    x: &[f64],
    analytic: &[f64],
    f: impl Fn(&[f64]) -> f64,
    check: impl Fn(usize) -> bool,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        if !check(i) {
            continue;
        }
        probe[i] = x[i] + H;
        let up = f(&probe);
        probe[i] = x[i] - H;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], numeric));
        checked += 1;
    }
    (worst, checked)
}

pub fn small_spec() -> GridSpec {
    GridSpec::new(48, 40, 8).unwrap()
}

pub fn random_grid(rng: &mut SplitMix64, spec: GridSpec, channels: usize, lo: f64, hi: f64) -> Grid {
    let data = (0..spec.cells() * channels).map(|_| rng.uniform(lo, hi)).collect();
    Grid::from_vec(spec, channels, data).unwrap()
}

/// Round-trip corpus: scene `i` has `1 + i % 6` lanes and seed `seed0 + i`.
pub fn corpus(n: usize, seed0: u64) -> Vec<(Scene, Targets)> {
    let cfg = EncoderConfig::default();
    (0..n)
        .map(|i| {
            let scene = generate(&SceneSpec::standard(1 + i % 6, seed0 + i as u64)).unwrap();
            let spec = GridSpec::new(scene.width, scene.height, cfg.stride).unwrap();
            let t = encode(&scene.lanes, &spec, &cfg).unwrap();
            (scene, t)
        })
        .collect()
}

/// Pairs lanes by order after sorting both sides by starting x, then sums
/// point distances. `None` when lane or point counts differ.
pub fn keypoint_errors(gt: &[Lane], decoded: &[Lane]) -> Option<(f64, usize)> {
    if gt.len() != decoded.len() {
        return None;
    }
    let by_start = |l: &[Lane]| {
        let mut v: Vec<Lane> = l.to_vec();
        v.sort_by(|a, b| a.start().x.total_cmp(&b.start().x));
        v
    };
    let (g, d) = (by_start(gt), by_start(decoded));
    let mut sum = 0.0;
    let mut count = 0;
    for (a, b) in g.iter().zip(&d) {
        if a.len() != b.len() {
            return None;
        }
        for (p, q) in a.points().iter().zip(b.points()) {
            sum += p.distance(q);
            count += 1;
        }
    }
    Some((sum, count))
}

/// Minimum assignment cost by enumerating every injection of the smaller
/// side into the larger. Costs are summed in row order.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    let need = rows.min(cols);
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols];
    let mut picked: Vec<(usize, usize)> = Vec::new();
    fn rec(
        cost: &[Vec<f64>],
        row: usize,
        need: usize,
        used: &mut [bool],
        picked: &mut Vec<(usize, usize)>,
        best: &mut f64,
    ) {
        if picked.len() == need {
            let total: f64 = picked.iter().map(|&(i, j)| cost[i][j]).sum();
            *best = best.min(total);
            return;
        }
        if cost.len() - row < need - picked.len() {
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                picked.push((row, j));
                rec(cost, row + 1, need, used, picked, best);
                picked.pop();
                used[j] = false;
            }
        }
        rec(cost, row + 1, need, used, picked, best);
    }
    rec(cost, 0, need, &mut used, &mut picked, &mut best);
    best
}

pub mod instances {
    use super::*;
    use keylane::lfa::{aggregate, aggregate_grad, SampleSet};
    use keylane::losses::{aux_loss, focal_loss, masked_l1, LossConfig};
    use keylane::matcher::{solve, CostMatrix};

    /// Worst relative error and number of checked coordinates.
    pub type Check = (f64, usize);

    pub fn focal(seed: u64) -> Check {
        let mut rng = SplitMix64::new(seed);
        let spec = small_spec();
        let cfg = LossConfig::default();
        // Predictions stay clear of the internal clamp.
        let pred = random_grid(&mut rng, spec, 1, 0.02, 0.98);
        let mut target = random_grid(&mut rng, spec, 1, 0.0, 0.99);
        for v in target.data_mut() {
            if rng.bernoulli(0.2) {
                *v = 1.0;
            }
        }
        let analytic = focal_loss(&pred, &target, &cfg).unwrap().grad;
        let f = |x: &[f64]| {
            let p = Grid::from_vec(spec, 1, x.to_vec()).unwrap();
            focal_loss(&p, &target, &cfg).unwrap().value
        };
        grad_check(pred.data(), analytic.data(), f, |_| true)
    }

    pub fn masked_l1_check(seed: u64) -> Check {
        let mut rng = SplitMix64::new(seed);
        let spec = small_spec();
        let pred = random_grid(&mut rng, spec, 2, -2.0, 2.0);
        let target = random_grid(&mut rng, spec, 2, -2.0, 2.0);
        let mut mask = Grid::zeros(spec, 1);
        for v in mask.data_mut() {
            *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
        }
        let analytic = masked_l1(&pred, &target, &mask).unwrap().grad;
        let f = |x: &[f64]| {
            let p = Grid::from_vec(spec, 2, x.to_vec()).unwrap();
            masked_l1(&p, &target, &mask).unwrap().value
        };
        let (p, t) = (pred.data(), target.data());
        grad_check(p, analytic.data(), f, |i| (p[i] - t[i]).abs() > 2.0 * H)
    }

    fn pairs(preds: &[[f64; 2]], gts: &[[f64; 2]]) -> Vec<(usize, usize)> {
        solve(&CostMatrix::l2(preds, gts).unwrap()).pairs
    }

    fn unflatten(x: &[f64], shape: &[usize]) -> Vec<Vec<[f64; 2]>> {
        let mut it = x.chunks_exact(2).map(|c| [c[0], c[1]]);
        shape.iter().map(|&m| it.by_ref().take(m).collect()).collect()
    }

    pub fn aux(seed: u64) -> Check {
        let mut rng = SplitMix64::new(seed);
        let cfg = LossConfig::default();
        let p = 1 + rng.below(4) as usize;
        let shape: Vec<usize> = (0..p).map(|_| 1 + rng.below(9) as usize).collect();
        let gts: Vec<Vec<[f64; 2]>> = (0..p)
            .map(|_| {
                let k = 1 + rng.below(10) as usize;
                (0..k)
                    .map(|_| [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)])
                    .collect()
            })
            .collect();
        let x: Vec<f64> = (0..2 * shape.iter().sum::<usize>())
            .map(|_| rng.uniform(-5.0, 5.0))
            .collect();
        let preds = unflatten(&x, &shape);
        let analytic: Vec<f64> = aux_loss(&preds, &gts, &cfg)
            .unwrap()
            .grad
            .into_iter()
            .flatten()
            .flatten()
            .collect();
        let f = |v: &[f64]| aux_loss(&unflatten(v, &shape), &gts, &cfg).unwrap().value;

        // Coordinate -> (keypoint, prediction, axis).
        let mut owner = Vec::new();
        for (k, &m) in shape.iter().enumerate() {
            for i in 0..m {
                owner.push((k, i, 0));
                owner.push((k, i, 1));
            }
        }
        let kink_free = |c: usize| {
            let (k, i, axis) = owner[c];
            let base = pairs(&preds[k], &gts[k]);
            // The matching must not change inside the stencil.
            for s in [-H, H] {
                let mut moved = preds[k].clone();
                moved[i][axis] += s;
                if pairs(&moved, &gts[k]) != base {
                    return false;
                }
            }
            // Stay off the SmoothL1 transition.
            match base.iter().find(|&&(m, _)| m == i) {
                Some(&(_, j)) => {
                    let d = (preds[k][i][axis] - gts[k][j][axis]).abs();
                    (d - cfg.smooth_l1_beta).abs() > 2.0 * H
                }
                None => true,
            }
        };
        grad_check(&x, &analytic, f, kink_free)
    }

    pub fn lfa(seed: u64) -> Check {
        let mut rng = SplitMix64::new(seed);
        let spec = small_spec();
        let channels = 2;
        let features = random_grid(&mut rng, spec, channels, -1.0, 1.0);
        let m = 1 + rng.below(9) as usize;
        let (w, h) = (spec.width_out as f64, spec.height_out as f64);
        let anchor = [rng.uniform(0.0, w - 1.0), rng.uniform(0.0, h - 1.0)];
        let offsets: Vec<[f64; 2]> = (0..m)
            .map(|_| [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)])
            .collect();
        let weights: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let upstream: Vec<f64> = (0..channels).map(|_| rng.uniform(-1.0, 1.0)).collect();

        let nf = features.data().len();
        let mut x = features.data().to_vec();
        x.extend(offsets.iter().flatten());
        x.extend(&weights);

        let split = |v: &[f64]| {
            let f = Grid::from_vec(spec, channels, v[..nf].to_vec()).unwrap();
            let o = v[nf..nf + 2 * m].chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            let s = SampleSet::new(anchor, o, v[nf + 2 * m..].to_vec()).unwrap();
            (f, s)
        };
        let scalar = |v: &[f64]| {
            let (f, s) = split(v);
            aggregate(&f, &s).iter().zip(&upstream).map(|(a, u)| a * u).sum::<f64>()
        };
        let (f0, s0) = split(&x);
        let g = aggregate_grad(&f0, &s0, &upstream).unwrap();
        let mut analytic = g.features.data().to_vec();
        analytic.extend(g.offsets.iter().flatten());
        analytic.extend(&g.weights);

        // Bilinear kinks sit on integer coordinates (including the clamp borders).
        let kink_free = |c: usize| {
            if c < nf || c >= nf + 2 * m {
                return true;
            }
            let k = c - nf;
            let pos = anchor[k % 2] + offsets[k / 2][k % 2];
            (pos - pos.round()).abs() > 2.0 * H
        };
        grad_check(&x, &analytic, scalar, kink_free)
    }
}
