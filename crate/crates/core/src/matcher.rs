//! Exact minimum-cost assignment between two point sets.
//!
//! The solver pads the rectangular problem to a square one with zero-cost
//! dummy rows or columns, runs the shortest-augmenting-path Hungarian
//! method to obtain optimal dual potentials, and then extracts the
//! lexicographically smallest optimal matching from the equality subgraph.
//! Every optimum is a perfect matching of that subgraph, so the tie-break
//! never sacrifices optimality.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    cost: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, cost: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix needs at least one row and column, got {rows}x{cols}"
            )));
        }
        if cost.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} cost matrix with {} entries",
                cost.len()
            )));
        }
        if let Some(c) = cost.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("cost entry {c}")));
        }
        if let Some(c) = cost.iter().find(|&&c| c < 0.0) {
            return Err(Error::Config(format!("negative cost entry {c}")));
        }
        Ok(Self { rows, cols, cost })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Euclidean distances between every prediction and every ground truth.
    pub fn l2(predictions: &[[f64; 2]], truths: &[[f64; 2]]) -> Result<Self> {
        let cost = predictions
            .iter()
            .flat_map(|p| truths.iter().map(move |g| (p[0] - g[0]).hypot(p[1] - g[1])))
            .collect();
        Self::new(predictions.len(), truths.len(), cost)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cost[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

pub fn solve(c: &CostMatrix) -> Assignment {
    let n = c.rows.max(c.cols);
    let cost = |i: usize, j: usize| if i < c.rows && j < c.cols { c.get(i, j) } else { 0.0 };

    // Shortest augmenting path Hungarian, 1-based with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let scale = (0..c.rows)
        .flat_map(|i| (0..c.cols).map(move |j| (i, j)))
        .map(|(i, j)| c.get(i, j))
        .fold(1.0f64, f64::max);
    let tol = 1e-10 * scale;
    let tight: Vec<bool> = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            cost(i, j) - u[i + 1] - v[j + 1] <= tol
        })
        .collect();

    let mut row_of = vec![usize::MAX; n];
    let mut col_of = vec![usize::MAX; n];
    for j in 1..=n {
        let i = owner[j] - 1;
        row_of[j - 1] = i;
        col_of[i] = j - 1;
    }
    lexicographic_fix(n, &tight, &mut row_of, &mut col_of);

    let pairs: Vec<(usize, usize)> = (0..c.rows)
        .filter(|&i| col_of[i] < c.cols)
        .map(|i| (i, col_of[i]))
        .collect();
    let total_cost = pairs.iter().map(|&(i, j)| c.get(i, j)).sum();
    Assignment { pairs, total_cost }
}

/// Rewrites a perfect matching of the tight subgraph into the one whose
/// row-by-row column choices are lexicographically smallest. Columns are
/// tried in index order, which puts real columns before dummy ones.
fn lexicographic_fix(n: usize, tight: &[bool], row_of: &mut [usize], col_of: &mut [usize]) {
    let mut seen = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if j == col_of[i] {
                break;
            }
            if !tight[i * n + j] {
                continue;
            }
            let r = row_of[j];
            if r < i {
                continue;
            }
            // Give j to i, then re-seat r among rows > i using the column i frees.
            let freed = col_of[i];
            row_of[j] = i;
            col_of[i] = j;
            row_of[freed] = usize::MAX;
            col_of[r] = usize::MAX;
            seen.iter_mut().for_each(|s| *s = false);
            if augment(r, i, n, tight, row_of, col_of, &mut seen) {
                break;
            }
            // Undo: restore i -> freed and r -> j.
            row_of[freed] = i;
            col_of[i] = freed;
            row_of[j] = r;
            col_of[r] = j;
        }
    }
}

/// Kuhn augmenting path from `row` restricted to rows after `fixed`.
fn augment(
    row: usize,
    fixed: usize,
    n: usize,
    tight: &[bool],
    row_of: &mut [usize],
    col_of: &mut [usize],
    seen: &mut [bool],
) -> bool {
    for j in 0..n {
        if !tight[row * n + j] || seen[j] {
            continue;
        }
        seen[j] = true;
        let holder = row_of[j];
        if holder == usize::MAX || (holder > fixed && augment(holder, fixed, n, tight, row_of, col_of, seen)) {
            row_of[j] = row;
            col_of[row] = j;
            return true;
        }
    }
    false
}


#[cfg(test)]
mod tests {
    use super::oracle::brute_force;
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    #[test]
    fn one_by_one() {
        let a = solve(&CostMatrix::from_rows(&[vec![3.5]]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 3.5);
    }

    #[test]
    fn two_by_two() {
        let a = solve(&CostMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 1.0]]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn all_ties_pick_identity() {
        let a = solve(&CostMatrix::new(3, 3, vec![1.0; 9]).unwrap());
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn wide_and_tall() {
        let wide = CostMatrix::from_rows(&[vec![5.0, 1.0, 3.0], vec![2.0, 4.0, 0.5]]).unwrap();
        let a = solve(&wide);
        assert_eq!(a.pairs, vec![(0, 1), (1, 2)]);
        assert_eq!(a.total_cost, 1.5);

        let tall = CostMatrix::from_rows(&[vec![5.0], vec![1.0], vec![1.0]]).unwrap();
        let a = solve(&tall);
        assert_eq!(a.pairs, vec![(1, 0)]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(CostMatrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(CostMatrix::new(0, 1, vec![]).is_err());
        assert!(CostMatrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    #[test]
    fn integer_ties_match_oracle_tie_break() {
        let mut rng = SplitMix64::new(11);
        for _ in 0..300 {
            let m = 1 + rng.below(6) as usize;
            let k = 1 + rng.below(6) as usize;
            let cost: Vec<f64> = (0..m * k).map(|_| rng.below(4) as f64).collect();
            let c = CostMatrix::new(m, k, cost).unwrap();
            let (total, pairs) = brute_force(&c);
            let a = solve(&c);
            assert_eq!(a.total_cost, total);
            assert_eq!(a.pairs, pairs, "{c:?}");
        }
    }

    #[test]
    fn m9_timing_soft_bound() {
        let mut rng = SplitMix64::new(5);
        let mats: Vec<CostMatrix> = (0..2000)
            .map(|_| CostMatrix::new(9, 10, (0..90).map(|_| rng.uniform(0.0, 20.0)).collect()).unwrap())
            .collect();
        let t = std::time::Instant::now();
        for c in &mats {
            std::hint::black_box(solve(c));
        }
        let per = t.elapsed().as_secs_f64() / mats.len() as f64;
        let bound = if cfg!(debug_assertions) { 200e-6 } else { 10e-6 };
        assert!(per < bound, "{:.2} us per 9x10 solve", per * 1e6);
    }

    proptest! {
        #[test]
        fn optimal_against_brute_force(m in 1usize..=6, k in 1usize..=6, seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let c = CostMatrix::new(m, k, (0..m * k).map(|_| rng.uniform(0.0, 10.0)).collect()).unwrap();
            let (total, _) = brute_force(&c);
            let a = solve(&c);
            prop_assert_eq!(a.pairs.len(), m.min(k));
            prop_assert_eq!(a.total_cost, total);
        }

        #[test]
        fn row_permutation_equivariance(n in 1usize..=6, k in 1usize..=6, seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let cost: Vec<f64> = (0..n * k).map(|_| rng.uniform(0.0, 10.0)).collect();
            let c = CostMatrix::new(n, k, cost.clone()).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.below(i as u64 + 1) as usize);
            }
            let permuted: Vec<f64> = perm.iter().flat_map(|&r| cost[r * k..(r + 1) * k].to_vec()).collect();
            let a = solve(&c);
            let b = solve(&CostMatrix::new(n, k, permuted).unwrap());
            let mut mapped: Vec<(usize, usize)> = b.pairs.iter().map(|&(i, j)| (perm[i], j)).collect();
            mapped.sort();
            prop_assert_eq!(mapped, a.pairs);
        }

        #[test]
        fn row_shift_keeps_pairs(n in 1usize..=6, seed in any::<u64>(), shift in 0.0f64..5.0) {
            let mut rng = SplitMix64::new(seed);
            let mut cost: Vec<f64> = (0..n * n).map(|_| rng.uniform(0.0, 10.0)).collect();
            let a = solve(&CostMatrix::new(n, n, cost.clone()).unwrap());
            let row = rng.below(n as u64) as usize;
            cost[row * n..(row + 1) * n].iter_mut().for_each(|c| *c += shift);
            let b = solve(&CostMatrix::new(n, n, cost).unwrap());
            prop_assert_eq!(a.pairs, b.pairs);
        }
    }
}
