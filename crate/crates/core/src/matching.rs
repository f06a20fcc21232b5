//! Minimum-cost bipartite assignment of predictions to ground-truth people.

use crate::skeleton::{PersonAnnotation, NUM_JOINTS};

/// One-to-one assignment between predictions and ground-truth people.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MatchAssignment {
    /// `(prediction, ground truth)`, sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

impl MatchAssignment {
    /// Ground-truth index matched to each prediction, if any.
    pub fn gt_of(&self, predictions: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; predictions];
        for &(p, g) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }

    pub fn total_cost(&self, cost: &[f64], cols: usize) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[p * cols + g]).sum()
    }
}

/// Minimum-cost injective assignment for a row-major `rows × cols` cost matrix.
///
/// Runs the shortest-augmenting-path method with dual potentials over the
/// smaller side, so the cost is `O(small² · large)`.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> MatchAssignment {
    assert_eq!(cost.len(), rows * cols, "cost matrix is {rows}x{cols}");
    assert!(cost.iter().all(|c| c.is_finite()), "costs must be finite");
    if rows == 0 || cols == 0 {
        return MatchAssignment { pairs: Vec::new(), unmatched: (0..rows).collect() };
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };
    let row_of_col = solve(n, m, at);

    let mut pairs: Vec<(usize, usize)> = row_of_col
        .iter()
        .enumerate()
        .filter_map(|(j, r)| r.map(|i| if transposed { (j, i) } else { (i, j) }))
        .collect();
    pairs.sort_unstable();
    let mut matched = vec![false; rows];
    for &(p, _) in &pairs {
        matched[p] = true;
    }
    let unmatched = (0..rows).filter(|&p| !matched[p]).collect();
    MatchAssignment { pairs, unmatched }
}

/// Assigns each of `n` rows to a distinct one of `m >= n` columns; returns the row per column.
fn solve(n: usize, m: usize, at: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays with a virtual column 0, as in the classical formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    (1..=m).map(|j| (owner[j] != 0).then(|| owner[j] - 1)).collect()
}

pub const MIN_SCORE: f64 = 1e-12;

/// Weighted mean L1 keypoint distance over visible joints plus `−ln score`.
///
/// `keypoints` holds `[x0, y0, x1, y1, ...]`. A person with no visible joints
/// contributes the score term only.
pub fn match_cost(keypoints: &[f64], score: f64, gt: &PersonAnnotation, w_kpt: f64, w_cls: f64) -> f64 {
    let mut sum = 0.0;
    let mut count = 0;
    for j in 0..NUM_JOINTS {
        if gt.visible[j] {
            sum += (keypoints[2 * j] - gt.keypoints[j][0]).abs() + (keypoints[2 * j + 1] - gt.keypoints[j][1]).abs();
            count += 1;
        }
    }
    let kpt = if count == 0 { 0.0 } else { sum / count as f64 };
    w_kpt * kpt - w_cls * score.max(MIN_SCORE).ln()
}

/// Row-major `[P × G]` cost matrix for `P` predictions (`[P×30]` keypoints).
pub fn cost_matrix(keypoints: &[f64], scores: &[f64], gts: &[PersonAnnotation], w_kpt: f64, w_cls: f64) -> Vec<f64> {
    let p = scores.len();
    let mut out = Vec::with_capacity(p * gts.len());
    for i in 0..p {
        let row = &keypoints[i * 2 * NUM_JOINTS..(i + 1) * 2 * NUM_JOINTS];
        for gt in gts {
            out.push(match_cost(row, scores[i], gt, w_kpt, w_cls));
        }
    }
    out
}
