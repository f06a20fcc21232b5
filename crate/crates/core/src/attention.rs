//! Multi-head attention and (temporal) multi-scale deformable attention.

use std::f64::consts::PI;
use std::sync::Arc;

use vepe_tensor::params::Ctx;
use vepe_tensor::{DeformLayout, Tensor, TensorError, Var};

use crate::config::AttentionConfig;
use crate::nn::{Init, Linear};

/// Per-frame pyramid of feature maps stacked into one token matrix.
///
/// Tokens are ordered level by level (finest first), row-major within a level.
#[derive(Clone, Debug)]
pub struct Memory {
    pub tokens: Var,
    pub shapes: Vec<(usize, usize)>,
}

impl Memory {
    pub fn len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token row ranges per level.
    pub fn level_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.shapes
            .iter()
            .map(|(h, w)| {
                let r = start..start + h * w;
                start = r.end;
                r
            })
            .collect()
    }

    /// Normalized centre of every token's cell.
    pub fn token_refs(&self) -> Vec<[f64; 2]> {
        self.shapes.iter().flat_map(|&(h, w)| crate::nn::cell_centres(h, w)).collect()
    }
}

pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            q: Linear::new(&mut s, "q", d, d),
            k: Linear::new(&mut s, "k", d, d),
            v: Linear::new(&mut s, "v", d, d),
            o: Linear::new(&mut s, "o", d, d),
            heads,
        }
    }

    /// Projected attention; `mask[i*nk + j]` true = key `j` visible to query `i`.
    ///
    /// With `zero_empty_rows`, a query whose keys are all masked gets a zero
    /// output row (before the output projection's bias).
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        query: Var,
        key: Var,
        value: Var,
        mask: Option<&[bool]>,
        zero_empty_rows: bool,
    ) -> Result<Var, TensorError> {
        let q = self.q.forward(ctx, query)?;
        let k = self.k.forward(ctx, key)?;
        let v = self.v.forward(ctx, value)?;
        let a = ctx.g.attention(q, k, v, self.heads, mask, zero_empty_rows)?;
        self.o.forward(ctx, a)
    }
}

/// Deformable attention over `frames × levels × points` samples per head.
///
/// With `frames == 1` this is single-frame multi-scale deformable attention; with
/// more frames the weights of each (query, head) are normalized jointly over
/// every frame, level and point.
pub struct DeformableAttention {
    pub value_proj: Linear,
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub frames: usize,
}

/// Forward result with the normalized sampling weights kept for inspection.
pub struct DeformOutput {
    pub out: Var,
    /// `[Nq × heads·samples]`, sample index `(t·L + l)·K + k`.
    pub weights: Var,
}

impl DeformableAttention {
    pub fn new(init: &mut Init, name: &str, cfg: &AttentionConfig, frames: usize) -> Self {
        let d = cfg.d_model;
        let (m, l, k) = (cfg.heads, cfg.levels, cfg.points);
        let samples = frames * l * k;
        let mut s = init.scope(name);
        let value_proj = Linear::new(&mut s, "value", d, d);
        let offsets = Linear::zeroed(&mut s, "offsets", d, m * samples * 2);
        let weights = Linear::zeroed(&mut s, "weights", d, m * samples);
        let out = Linear::new(&mut s, "out", d, d);
        // Each head starts looking along its own direction, further out for later points.
        let bias = s.store.value_mut(offsets.b).data_mut();
        for head in 0..m {
            let theta = 2.0 * PI * head as f64 / m as f64;
            for slot in 0..samples {
                let radius = (slot % k + 1) as f64;
                let base = (head * samples + slot) * 2;
                bias[base] = theta.cos() * radius;
                bias[base + 1] = theta.sin() * radius;
            }
        }
        Self { value_proj, offsets, weights, out, heads: m, levels: l, points: k, frames }
    }

    pub fn samples(&self) -> usize {
        self.frames * self.levels * self.points
    }

    pub fn forward(&self, ctx: &mut Ctx, queries: Var, refs: &[[f64; 2]], memories: &[&Memory]) -> Result<Var, TensorError> {
        Ok(self.forward_detailed(ctx, queries, refs, memories)?.out)
    }

    pub fn forward_detailed(
        &self,
        ctx: &mut Ctx,
        queries: Var,
        refs: &[[f64; 2]],
        memories: &[&Memory],
    ) -> Result<DeformOutput, TensorError> {
        if memories.len() != self.frames {
            return Err(TensorError::Config(format!("expected {} frames of memory, got {}", self.frames, memories.len())));
        }
        let shapes = &memories[0].shapes;
        if shapes.len() != self.levels {
            return Err(TensorError::Config(format!("expected {} levels, got {}", self.levels, shapes.len())));
        }
        if let Some(bad) = memories.iter().position(|m| &m.shapes != shapes) {
            return Err(TensorError::Config(format!("frame {bad} level shapes {:?} differ from {:?}", memories[bad].shapes, shapes)));
        }
        let nq = ctx.g.shape(queries)[0];
        if refs.len() != nq {
            return Err(TensorError::Config(format!("{} reference points for {nq} queries", refs.len())));
        }
        let layout = Arc::new(DeformLayout::stacked(self.heads, self.frames, shapes, self.points));
        let tokens: Vec<Var> = memories.iter().map(|m| m.tokens).collect();
        let stacked = if tokens.len() == 1 { tokens[0] } else { ctx.g.concat_rows(&tokens)? };
        let value = self.value_proj.forward(ctx, stacked)?;
        let offsets = self.offsets.forward(ctx, queries)?;
        let logits = self.weights.forward(ctx, queries)?;
        let s = self.samples();
        let grouped = ctx.g.reshape(logits, &[nq * self.heads, s])?;
        let normalized = ctx.g.softmax(grouped, 1)?;
        let weights = ctx.g.reshape(normalized, &[nq, self.heads * s])?;
        let sampled = ctx.g.deform_sample(value, refs, offsets, weights, layout)?;
        let out = self.out.forward(ctx, sampled)?;
        Ok(DeformOutput { out, weights })
    }
}

/// Constant memory from a host tensor, for tests and cached features.
pub fn constant_memory(ctx: &mut Ctx, tokens: Tensor, shapes: Vec<(usize, usize)>) -> Memory {
    Memory { tokens: ctx.g.constant(tokens), shapes }
}
