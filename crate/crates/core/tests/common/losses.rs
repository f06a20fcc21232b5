//! Brute-force assignment and host-side triplet hinges.

use rand_chacha::ChaCha8Rng;
use vepe::loss::{cosine_distance, triplet_loss};
use vepe_tensor::{Graph, Tensor};

/// Minimum total cost over every injective assignment of the smaller side.
pub fn exhaustive_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, transpose: bool) {
        let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
        if r == n {
            *best = best.min(acc);
            return;
        }
        for c in 0..m {
            if used[c] {
                continue;
            }
            used[c] = true;
            let v = if transpose { cost[c * cols + r] } else { cost[r * cols + c] };
            go(cost, rows, cols, r + 1, used, acc + v, best, transpose);
            used[c] = false;
        }
    }
    let transpose = rows > cols;
    let mut best = f64::INFINITY;
    let m = if transpose { rows } else { cols };
    go(cost, rows, cols, 0, &mut vec![false; m], 0.0, &mut best, transpose);
    if rows.min(cols) == 0 { 0.0 } else { best }
}

pub struct Triplets {
    pub a: Tensor,
    pub p: Tensor,
    pub n: Tensor,
}

pub fn random_triplets(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Triplets {
    let mut draw = || Tensor::randn(&[rows, dim], 1.0, rng);
    Triplets { a: draw(), p: draw(), n: draw() }
}

pub fn loss_of(t: &Triplets, margin: f64) -> f64 {
    let mut g = Graph::new();
    let (a, p, n) = (g.constant(t.a.clone()), g.constant(t.p.clone()), g.constant(t.n.clone()));
    let l = triplet_loss(&mut g, a, p, n, margin).unwrap();
    g.value(l).data()[0]
}

/// Host-side hinge of each triplet.
pub fn hinges(t: &Triplets, margin: f64) -> Vec<f64> {
    (0..t.a.shape()[0]).map(|i| (cosine_distance(t.a.row(i), t.p.row(i)) - cosine_distance(t.a.row(i), t.n.row(i)) + margin).max(0.0)).collect()
}
