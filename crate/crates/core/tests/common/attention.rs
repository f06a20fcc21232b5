//! Naive loop implementations of deformable attention, written from the defining sums.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vepe::attention::{DeformableAttention, Memory};
use vepe::config::AttentionConfig;
use vepe::nn::{Init, Linear};
use vepe_tensor::params::{Ctx, ParamStore};
use vepe_tensor::{Graph, Tensor};

pub fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += std * (rng.random::<f64>() * 2.0 - 1.0);
        }
    }
}

/// `x·W + b` for row-major `x` with `n` rows.
pub fn linear(store: &ParamStore, l: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let w = store.value(l.w).data();
    let b = store.value(l.b).data();
    let (i, o) = (l.fan_in, l.fan_out);
    let mut y = vec![0.0; n * o];
    for r in 0..n {
        for c in 0..o {
            let mut acc = b[c];
            for k in 0..i {
                acc += x[r * i + k] * w[k * o + c];
            }
            y[r * o + c] = acc;
        }
    }
    y
}

/// Bilinear read of one head's channels at pixel point `(x, y)`; cells outside
/// the `h×w` map read as zero.
#[allow(clippy::too_many_arguments)]
pub fn read(value: &[f64], dim: usize, start: usize, h: usize, w: usize, head: usize, dh: usize, x: f64, y: f64) -> Vec<f64> {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let mut out = vec![0.0; dh];
    for (cx, cy, wt) in [(x0, y0, (1.0 - fx) * (1.0 - fy)), (x0 + 1.0, y0, fx * (1.0 - fy)), (x0, y0 + 1.0, (1.0 - fx) * fy), (x0 + 1.0, y0 + 1.0, fx * fy)] {
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            continue;
        }
        let row = start + cy as usize * w + cx as usize;
        for c in 0..dh {
            out[c] += wt * value[row * dim + head * dh + c];
        }
    }
    out
}

/// Deformable attention by direct summation over heads, frames, levels and points.
pub fn naive_deformable(
    store: &ParamStore,
    att: &DeformableAttention,
    queries: &[f64],
    refs: &[[f64; 2]],
    frames: &[Vec<f64>],
    shapes: &[(usize, usize)],
    dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    let nq = refs.len();
    let (m, l, k, t) = (att.heads, att.levels, att.points, att.frames);
    let s = t * l * k;
    let dh = dim / m;
    let tokens: usize = shapes.iter().map(|(h, w)| h * w).sum();
    let values: Vec<Vec<f64>> = frames.iter().map(|f| linear(store, &att.value_proj, f, tokens)).collect();
    let offsets = linear(store, &att.offsets, queries, nq);
    let logits = linear(store, &att.weights, queries, nq);
    let mut weights = vec![0.0; nq * m * s];
    let mut sampled = vec![0.0; nq * dim];
    for q in 0..nq {
        for head in 0..m {
            let row = &logits[(q * m + head) * s..(q * m + head + 1) * s];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for frame in 0..t {
                let mut start = 0;
                for (level, &(h, w)) in shapes.iter().enumerate() {
                    for point in 0..k {
                        let slot = (frame * l + level) * k + point;
                        let a = (row[slot] - max).exp() / z;
                        weights[(q * m + head) * s + slot] = a;
                        let o = 2 * ((q * m + head) * s + slot);
                        let x = refs[q][0] * w as f64 - 0.5 + offsets[o];
                        let y = refs[q][1] * h as f64 - 0.5 + offsets[o + 1];
                        let v = read(&values[frame], dim, start, h, w, head, dh, x, y);
                        for c in 0..dh {
                            sampled[q * dim + head * dh + c] += a * v[c];
                        }
                    }
                    start += h * w;
                }
            }
        }
    }
    (linear(store, &att.out, &sampled, nq), weights)
}

pub struct Setup {
    pub cfg: AttentionConfig,
    pub frames: usize,
    pub shapes: Vec<(usize, usize)>,
}

pub fn random_setup(rng: &mut ChaCha8Rng) -> Setup {
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let d_model = 4 * heads * rng.random_range(1..3);
    let levels = rng.random_range(1..4);
    let cfg = AttentionConfig { d_model, heads, levels, points: rng.random_range(1..4), frames: 3, ffn_width: 8 };
    let shapes = (0..levels).map(|_| (rng.random_range(1..6), rng.random_range(1..6))).collect();
    Setup { cfg, frames: rng.random_range(1..4), shapes }
}

pub struct Run {
    pub out: Vec<f64>,
    pub weights: Vec<f64>,
    pub oracle_out: Vec<f64>,
    pub oracle_weights: Vec<f64>,
}

pub fn run_case(setup: &Setup, seed: u64) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = {
        let mut init = Init::new(&mut store, &mut rng, "");
        DeformableAttention::new(&mut init, "att", &setup.cfg, setup.frames)
    };
    perturb(&mut store, &mut rng, 0.8);
    let d = setup.cfg.d_model;
    let nq = rng.random_range(1..5);
    let tokens: usize = setup.shapes.iter().map(|(h, w)| h * w).sum();
    let queries = Tensor::randn(&[nq, d], 1.0, &mut rng);
    let frames: Vec<Tensor> = (0..setup.frames).map(|_| Tensor::randn(&[tokens, d], 1.0, &mut rng)).collect();
    let refs: Vec<[f64; 2]> = (0..nq).map(|_| [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)]).collect();

    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, false);
    let q = ctx.g.constant(queries.clone());
    let mems: Vec<Memory> = frames.iter().map(|f| Memory { tokens: ctx.g.constant(f.clone()), shapes: setup.shapes.clone() }).collect();
    let views: Vec<&Memory> = mems.iter().collect();
    let res = att.forward_detailed(&mut ctx, q, &refs, &views).unwrap();
    let out = g.value(res.out).data().to_vec();
    let weights = g.value(res.weights).data().to_vec();
    let frame_data: Vec<Vec<f64>> = frames.iter().map(|f| f.data().to_vec()).collect();
    let (oracle_out, oracle_weights) = naive_deformable(&store, &att, queries.data(), &refs, &frame_data, &setup.shapes, d);
    Run { out, weights, oracle_out, oracle_weights }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
