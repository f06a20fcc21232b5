//! Fused sampling core of (temporal) multi-scale deformable attention.
//!
//! For query `q`, head `m` and sample slot `s` the core reads the value map
//! selected by `sample_level[s]` at the pixel location
//! `(ref.x·W − 0.5 + Δx, ref.y·H − 0.5 + Δy)` and accumulates it, scaled by the
//! attention weight, into the head's channel block of the output row.

use super::bilinear::bilinear_corners;

/// One feature map inside the stacked value matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelSpec {
    pub height: usize,
    pub width: usize,
    /// First token row of this map in the value matrix.
    pub start: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub maps: Vec<LevelSpec>,
    /// Map index for every sample slot.
    pub sample_map: Vec<usize>,
}

impl DeformLayout {
    /// Layout for `frames × levels × points` samples over `frames × levels` maps
    /// stacked frame-major.
    pub fn stacked(heads: usize, frames: usize, level_shapes: &[(usize, usize)], points: usize) -> Self {
        let tokens_per_frame: usize = level_shapes.iter().map(|(h, w)| h * w).sum();
        let mut maps = Vec::with_capacity(frames * level_shapes.len());
        for t in 0..frames {
            let mut start = t * tokens_per_frame;
            for &(height, width) in level_shapes {
                maps.push(LevelSpec { height, width, start });
                start += height * width;
            }
        }
        let sample_map = (0..maps.len())
            .flat_map(|m| std::iter::repeat_n(m, points))
            .collect();
        Self { heads, maps, sample_map }
    }

    pub fn samples(&self) -> usize {
        self.sample_map.len()
    }

    pub fn tokens(&self) -> usize {
        self.maps.iter().map(|m| m.start + m.height * m.width).max().unwrap_or(0)
    }

    /// Pixel-space sample location of slot `s` for a reference point and offset.
    pub fn location(&self, s: usize, reference: [f64; 2], offset: [f64; 2]) -> (f64, f64) {
        let map = &self.maps[self.sample_map[s]];
        (
            reference[0] * map.width as f64 - 0.5 + offset[0],
            reference[1] * map.height as f64 - 0.5 + offset[1],
        )
    }
}

pub(crate) struct DeformArgs<'a> {
    pub layout: &'a DeformLayout,
    pub value: &'a [f64],
    pub dim: usize,
    pub refs: &'a [[f64; 2]],
    pub offsets: &'a [f64],
    pub weights: &'a [f64],
}

pub(crate) fn forward(a: &DeformArgs) -> Vec<f64> {
    let heads = a.layout.heads;
    let dh = a.dim / heads;
    let samples = a.layout.samples();
    let nq = a.refs.len();
    let mut out = vec![0.0; nq * a.dim];
    for q in 0..nq {
        for m in 0..heads {
            let dst = &mut out[q * a.dim + m * dh..q * a.dim + (m + 1) * dh];
            for s in 0..samples {
                let slot = (q * heads + m) * samples + s;
                let w = a.weights[slot];
                let off = [a.offsets[2 * slot], a.offsets[2 * slot + 1]];
                let (x, y) = a.layout.location(s, a.refs[q], off);
                if !x.is_finite() || !y.is_finite() {
                    continue;
                }
                let map = &a.layout.maps[a.layout.sample_map[s]];
                for c in bilinear_corners(x, y, map.height, map.width) {
                    let Some(cell) = c.cell else { continue };
                    let cw = w * c.weight;
                    if cw == 0.0 {
                        continue;
                    }
                    let base = (map.start + cell) * a.dim + m * dh;
                    for (o, v) in dst.iter_mut().zip(&a.value[base..base + dh]) {
                        *o += cw * v;
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct DeformGrads {
    pub value: Vec<f64>,
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

pub(crate) fn backward(a: &DeformArgs, grad_out: &[f64]) -> DeformGrads {
    let heads = a.layout.heads;
    let dh = a.dim / heads;
    let samples = a.layout.samples();
    let nq = a.refs.len();
    let mut g = DeformGrads {
        value: vec![0.0; a.value.len()],
        offsets: vec![0.0; a.offsets.len()],
        weights: vec![0.0; a.weights.len()],
    };
    for q in 0..nq {
        for m in 0..heads {
            let go = &grad_out[q * a.dim + m * dh..q * a.dim + (m + 1) * dh];
            for s in 0..samples {
                let slot = (q * heads + m) * samples + s;
                let w = a.weights[slot];
                let off = [a.offsets[2 * slot], a.offsets[2 * slot + 1]];
                let (x, y) = a.layout.location(s, a.refs[q], off);
                if !x.is_finite() || !y.is_finite() {
                    continue;
                }
                let map = &a.layout.maps[a.layout.sample_map[s]];
                let (mut gw, mut gx, mut gy) = (0.0, 0.0, 0.0);
                for c in bilinear_corners(x, y, map.height, map.width) {
                    let Some(cell) = c.cell else { continue };
                    let base = (map.start + cell) * a.dim + m * dh;
                    let src = &a.value[base..base + dh];
                    let dot: f64 = src.iter().zip(go).map(|(v, g)| v * g).sum();
                    gw += c.weight * dot;
                    gx += c.dx * dot;
                    gy += c.dy * dot;
                    let cw = w * c.weight;
                    if cw != 0.0 {
                        for (d, gv) in g.value[base..base + dh].iter_mut().zip(go) {
                            *d += cw * gv;
                        }
                    }
                }
                g.weights[slot] += gw;
                g.offsets[2 * slot] += w * gx;
                g.offsets[2 * slot + 1] += w * gy;
            }
        }
    }
    g
}
