//! The full model: parameters plus both stages, and forward-only inference helpers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vepe_tensor::params::{Ctx, ParamStore};
use vepe_tensor::{checkpoint, sigmoid, Graph, Tensor, TensorError};

use crate::attention::Memory;
use crate::config::{ConfigError, RunConfig};
use crate::metrics::PosePrediction;
use crate::spatial::{image_tensor, SpatialOutput, SpatialStage};
use crate::synth::VideoClip;
use crate::temporal::{FrameInput, TemporalOutput, TemporalStage};

pub const SPATIAL_PREFIX: &str = "spatial.";
pub const TEMPORAL_PREFIX: &str = "temporal.";

pub struct Vepe {
    pub config: RunConfig,
    pub store: ParamStore,
    pub spatial: SpatialStage,
    pub temporal: TemporalStage,
}

/// Host copy of one frame's spatial-stage results.
#[derive(Clone, Debug)]
pub struct CachedFrame {
    pub tokens: Tensor,
    pub shapes: Vec<(usize, usize)>,
    pub queries: Tensor,
    pub keypoints: Tensor,
    pub scores: Vec<f64>,
}

impl CachedFrame {
    pub fn from_output(g: &Graph, out: &SpatialOutput) -> Self {
        let last = out.last();
        Self {
            tokens: g.value(out.memory.tokens).clone(),
            shapes: out.memory.shapes.clone(),
            queries: g.value(out.queries).clone(),
            keypoints: g.value(last.keypoints).clone(),
            scores: g.value(last.logits).data().iter().map(|&l| sigmoid(l)).collect(),
        }
    }

    /// Constant graph inputs for the temporal stage.
    pub fn input(&self, ctx: &mut Ctx) -> FrameInput {
        FrameInput {
            memory: Memory { tokens: ctx.g.constant(self.tokens.clone()), shapes: self.shapes.clone() },
            queries: ctx.g.constant(self.queries.clone()),
            keypoints: ctx.g.constant(self.keypoints.clone()),
            scores: self.scores.clone(),
        }
    }

    pub fn predictions(&self) -> Vec<PosePrediction> {
        (0..self.scores.len()).map(|i| PosePrediction::from_row(self.keypoints.row(i), self.scores[i])).collect()
    }
}

/// Reference frame indices for keyframe `t` of a `len`-frame clip: alternately
/// previous and next neighbours, with missing neighbours replaced by `t` itself.
/// A single-frame clip has no references.
pub fn window(t: usize, len: usize, refs: usize) -> Vec<usize> {
    if len <= 1 {
        return Vec::new();
    }
    (0..refs)
        .map(|i| {
            let step = i / 2 + 1;
            if i % 2 == 0 {
                t.checked_sub(step).unwrap_or(t)
            } else if t + step < len {
                t + step
            } else {
                t
            }
        })
        .collect()
}

/// Keyframe predictions from the temporal stage, over the selected queries.
#[derive(Clone, Debug)]
pub struct TemporalPrediction {
    pub predictions: Vec<PosePrediction>,
    /// Selected query slots per frame, keyframe first.
    pub selected: Vec<Vec<usize>>,
    /// Reference frame indices, in the order used.
    pub refs: Vec<usize>,
    /// Per reference frame, the linked reference row of each keyframe row.
    pub links: Option<Vec<Vec<usize>>>,
    /// Keyframe-by-reference instance similarities per reference frame.
    pub similarity: Option<Vec<Tensor>>,
    /// Keypoints per decoder layer, `[n×30]` each.
    pub layer_keypoints: Vec<Tensor>,
}

impl Vepe {
    pub fn new(config: &RunConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut init = crate::nn::Init::new(&mut store, &mut rng, "");
        let spatial = SpatialStage::new(&mut init, &config.model);
        let temporal = TemporalStage::new(&mut init, &config.model, &config.temporal);
        Ok(Self { config: config.clone(), store, spatial, temporal })
    }

    pub fn load(&mut self, path: &Path) -> Result<(), checkpoint::CheckpointError> {
        checkpoint::load(&mut self.store, path)
    }

    pub fn save(&self, path: &Path) -> Result<(), checkpoint::CheckpointError> {
        checkpoint::save(&self.store, path)
    }

    pub fn frame_tensor(clip: &VideoClip, t: usize) -> Tensor {
        image_tensor(&clip.frames[t], clip.height, clip.width)
    }

    /// Forward-only spatial pass over one image.
    pub fn spatial_frame(&self, image: &Tensor) -> Result<CachedFrame, TensorError> {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let out = self.spatial.forward(&mut ctx, image)?;
        Ok(CachedFrame::from_output(&g, &out))
    }

    pub fn spatial_clip(&self, clip: &VideoClip) -> Result<Vec<CachedFrame>, TensorError> {
        (0..clip.len()).map(|t| self.spatial_frame(&Self::frame_tensor(clip, t))).collect()
    }

    /// Temporal stage for keyframe `t` over cached spatial results.
    pub fn temporal_frame(&self, cache: &[CachedFrame], t: usize, threshold: f64) -> Result<TemporalPrediction, TensorError> {
        let refs = window(t, cache.len(), self.config.model.attention.frames - 1);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let key = cache[t].input(&mut ctx);
        let ref_inputs: Vec<FrameInput> = refs.iter().map(|&r| cache[r].input(&mut ctx)).collect();
        let out: TemporalOutput = self.temporal.forward(&mut ctx, &key, &ref_inputs, threshold, false)?;
        let last = out.last();
        let kp = g.value(last.keypoints);
        let logits = g.value(last.logits).data();
        let predictions = (0..logits.len()).map(|i| PosePrediction::from_row(kp.row(i), sigmoid(logits[i]))).collect();
        let layer_keypoints = out.layers.iter().map(|l| g.value(l.keypoints).clone()).collect();
        let (links, similarity) = match out.mask {
            Some(m) => (Some(m.links()), Some(m.similarity)),
            None => (None, None),
        };
        Ok(TemporalPrediction { predictions, selected: out.selected, refs, links, similarity, layer_keypoints })
    }

    /// Instance-query links from keyframe `t` to each reference, regardless of
    /// whether the mask is enabled for attention.
    pub fn instance_links(&self, cache: &[CachedFrame], t: usize, threshold: f64) -> Result<InstanceLinks, TensorError> {
        let refs = window(t, cache.len(), self.config.model.attention.frames - 1);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &self.store, false);
        let mut selected = Vec::new();
        let mut instances = Vec::new();
        for &f in std::iter::once(&t).chain(&refs) {
            let input = cache[f].input(&mut ctx);
            let sel = crate::temporal::pose_query_selection(&input.scores, threshold, self.config.temporal.min_keep);
            let q = ctx.g.gather_rows(input.queries, &sel)?;
            let kp = ctx.g.gather_rows(input.keypoints, &sel)?;
            let inst = self.temporal.instance.forward(&mut ctx, q, kp, &sel)?;
            instances.push(ctx.g.value(inst).clone());
            selected.push(sel);
        }
        let ref_views: Vec<&Tensor> = instances[1..].iter().collect();
        let mask = crate::temporal::compute_instance_mask(&instances[0], &ref_views);
        Ok(InstanceLinks { links: mask.links(), similarity: mask.similarity, refs, selected })
    }
}

/// Keyframe-to-reference instance matches for one window.
#[derive(Clone, Debug)]
pub struct InstanceLinks {
    pub refs: Vec<usize>,
    /// Selected query slots per frame, keyframe first.
    pub selected: Vec<Vec<usize>>,
    /// Per reference frame, the argmax reference row of each keyframe row.
    pub links: Vec<Vec<usize>>,
    pub similarity: Vec<Tensor>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_replaces_missing_neighbours_with_the_keyframe() {
        assert_eq!(window(0, 3, 2), vec![0, 1]);
        assert_eq!(window(1, 3, 2), vec![0, 2]);
        assert_eq!(window(2, 3, 2), vec![1, 2]);
        assert_eq!(window(0, 2, 2), vec![0, 1]);
        assert!(window(0, 1, 2).is_empty());
    }
}
