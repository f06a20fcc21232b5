//! Temporal stage: pose query selection, instance queries and masks, the
//! pose-query encoder (STPE), the deformable memory encoder (STDME) and the
//! cascaded pose decoder (STPD).

use vepe_tensor::params::{Ctx, ParamId};
use vepe_tensor::{Tensor, TensorError, Var, INVERSE_SIGMOID_EPS};

use crate::attention::{DeformableAttention, Memory, MultiHeadAttention};
use crate::config::{AttentionConfig, ModelConfig, TemporalConfig};
use crate::nn::{Ffn, Init, LayerNorm, Linear};
use crate::spatial::{mean_keypoints, LayerPrediction, PoseEmbed, KP_WIDTH};

/// Indices (ascending) of queries with `score >= threshold`; when fewer than
/// `min_keep` pass, the `min_keep` highest-scoring queries instead.
pub fn pose_query_selection(scores: &[f64], threshold: f64, min_keep: usize) -> Vec<usize> {
    let passed: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= threshold).collect();
    if passed.len() >= min_keep.min(scores.len()) {
        return passed;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(min_keep);
    order.sort_unstable();
    order
}

/// Top-1 attendability per reference frame plus the similarities it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    /// Per reference frame, row-major `[N_key × N_ref]`.
    pub blocks: Vec<Vec<bool>>,
    pub similarity: Vec<Tensor>,
}

impl InstanceMask {
    /// Per reference frame, the reference row each key row links to.
    pub fn links(&self) -> Vec<Vec<usize>> {
        self.similarity
            .iter()
            .zip(&self.blocks)
            .map(|(s, b)| {
                let nr = s.shape()[1];
                (0..s.shape()[0]).map(|i| (0..nr).find(|&j| b[i * nr + j]).expect("one link per row")).collect()
            })
            .collect()
    }

    /// Blocks laid side by side for attention over concatenated references.
    pub fn concatenated(&self) -> Vec<bool> {
        let nk = self.similarity.first().map_or(0, |s| s.shape()[0]);
        let mut out = Vec::new();
        for i in 0..nk {
            for (s, b) in self.similarity.iter().zip(&self.blocks) {
                let nr = s.shape()[1];
                out.extend_from_slice(&b[i * nr..(i + 1) * nr]);
            }
        }
        out
    }
}

/// Cosine similarities of unit rows and the per-row argmax mask; ties go to the lowest index.
pub fn compute_instance_mask(key: &Tensor, refs: &[&Tensor]) -> InstanceMask {
    let (nk, d) = (key.shape()[0], key.shape()[1]);
    let mut blocks = Vec::with_capacity(refs.len());
    let mut similarity = Vec::with_capacity(refs.len());
    for r in refs {
        let nr = r.shape()[0];
        let sim = Tensor::from_fn(&[nk, nr], |idx| {
            let (i, j) = (idx / nr, idx % nr);
            (0..d).map(|c| key.data()[i * d + c] * r.data()[j * d + c]).sum()
        });
        let mut block = vec![false; nk * nr];
        for i in 0..nk {
            let row = sim.row(i);
            let best = (0..nr).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            block[i * nr + best] = true;
        }
        blocks.push(block);
        similarity.push(sim);
    }
    InstanceMask { blocks, similarity }
}

/// Identity embeddings paired one-to-one with pose queries.
pub struct InstanceHead {
    /// `[N×d]`, indexed by the originating query slot.
    pub table: ParamId,
    pub pose_embed: PoseEmbed,
    pub l1: Linear,
    pub l2: Linear,
}

impl InstanceHead {
    pub fn new(init: &mut Init, name: &str, queries: usize, d: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            table: s.uniform("table", &[queries, d], 0.1),
            pose_embed: PoseEmbed::new(&mut s, "pose_embed", d),
            l1: Linear::new(&mut s, "l1", d, d),
            l2: Linear::new(&mut s, "l2", d, d),
        }
    }

    /// Unit-norm instance queries `[n×d]` for the selected pose queries.
    pub fn forward(&self, ctx: &mut Ctx, queries: Var, keypoints: Var, slots: &[usize]) -> Result<Var, TensorError> {
        let table = ctx.p(self.table);
        let rows = ctx.g.gather_rows(table, slots)?;
        let x = ctx.g.add(queries, rows)?;
        let pe = self.pose_embed.forward(ctx, keypoints)?;
        let x = ctx.g.add(x, pe)?;
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        let y = self.l2.forward(ctx, h)?;
        ctx.g.l2_normalize_rows(y)
    }
}

/// Pre-normalized residual: `x + f(LN(x))` is assembled by the callers below.
fn prenorm(ctx: &mut Ctx, norm: &LayerNorm, x: Var) -> Result<Var, TensorError> {
    norm.forward(ctx, x)
}

pub struct StpeLayer {
    pub self_attn: MultiHeadAttention,
    pub n1: LayerNorm,
    pub cross: MultiHeadAttention,
    pub n2: LayerNorm,
    pub ffn: Ffn,
    pub n3: LayerNorm,
}

impl StpeLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        let mut s = init.scope(name);
        Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, cfg.heads),
            n1: LayerNorm::new(&mut s, "n1", d),
            cross: MultiHeadAttention::new(&mut s, "cross", d, cfg.heads),
            n2: LayerNorm::new(&mut s, "n2", d),
            ffn: Ffn::new(&mut s, "ffn", d, cfg.ffn_width),
            n3: LayerNorm::new(&mut s, "n3", d),
        }
    }

    /// `refs` are the concatenated reference queries; `mask` is `[N_key × N_refs]`.
    ///
    /// A key row whose mask blocks every reference gets no cross-attention
    /// contribution at all; with no references the cross step is skipped.
    pub fn forward(&self, ctx: &mut Ctx, key: Var, refs: Option<Var>, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let h = prenorm(ctx, &self.n1, key)?;
        let sa = self.self_attn.forward(ctx, h, h, h, None, false)?;
        let mut x = ctx.g.add(key, sa)?;
        if let Some(r) = refs {
            let h = prenorm(ctx, &self.n2, x)?;
            let mut ca = self.cross.forward(ctx, h, r, r, mask, true)?;
            if let Some(m) = mask {
                let (nk, d) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
                let nr = m.len() / nk.max(1);
                let open: Vec<bool> = (0..nk).map(|i| m[i * nr..(i + 1) * nr].iter().any(|&b| b)).collect();
                if open.iter().any(|o| !o) {
                    let keep = ctx.g.constant(Tensor::from_fn(&[nk, d], |i| if open[i / d] { 1.0 } else { 0.0 }));
                    ca = ctx.g.mul(ca, keep)?;
                }
            }
            x = ctx.g.add(x, ca)?;
        }
        let h = prenorm(ctx, &self.n3, x)?;
        let f = self.ffn.forward(ctx, h)?;
        ctx.g.add(x, f)
    }
}

pub struct StdmeLayer {
    pub msda: DeformableAttention,
    pub n1: LayerNorm,
    pub tmsda: DeformableAttention,
    pub n2: LayerNorm,
    pub ffn: Ffn,
    pub n3: LayerNorm,
}

impl StdmeLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        let mut s = init.scope(name);
        Self {
            msda: DeformableAttention::new(&mut s, "msda", cfg, 1),
            n1: LayerNorm::new(&mut s, "n1", d),
            tmsda: DeformableAttention::new(&mut s, "tmsda", cfg, cfg.frames),
            n2: LayerNorm::new(&mut s, "n2", d),
            ffn: Ffn::new(&mut s, "ffn", d, cfg.ffn_width),
            n3: LayerNorm::new(&mut s, "n3", d),
        }
    }

    /// Intra-frame deformable attention over the key memory, then temporal
    /// deformable attention from key tokens into `[key, refs...]`, then FFN.
    pub fn forward(&self, ctx: &mut Ctx, key: &Memory, refs: &[&Memory]) -> Result<Memory, TensorError> {
        if refs.len() + 1 != self.tmsda.frames {
            return Err(TensorError::Config(format!("memory encoder expects {} reference frames, got {}", self.tmsda.frames - 1, refs.len())));
        }
        let token_refs = key.token_refs();
        let h = prenorm(ctx, &self.n1, key.tokens)?;
        let hm = Memory { tokens: h, shapes: key.shapes.clone() };
        let a = self.msda.forward(ctx, h, &token_refs, &[&hm])?;
        let x = ctx.g.add(key.tokens, a)?;
        let h = prenorm(ctx, &self.n2, x)?;
        let hm = Memory { tokens: h, shapes: key.shapes.clone() };
        let mut frames = vec![&hm];
        frames.extend_from_slice(refs);
        let t = self.tmsda.forward(ctx, h, &token_refs, &frames)?;
        let x = ctx.g.add(x, t)?;
        let h = prenorm(ctx, &self.n3, x)?;
        let f = self.ffn.forward(ctx, h)?;
        let x = ctx.g.add(x, f)?;
        Ok(Memory { tokens: x, shapes: key.shapes.clone() })
    }
}

pub struct StpdLayer {
    pub self_attn: MultiHeadAttention,
    pub n1: LayerNorm,
    pub cross: DeformableAttention,
    pub n2: LayerNorm,
    pub ffn: Ffn,
    pub n3: LayerNorm,
    pub kp_head: Linear,
    pub score_head: Linear,
}

impl StpdLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &AttentionConfig) -> Self {
        let d = cfg.d_model;
        let mut s = init.scope(name);
        Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, cfg.heads),
            n1: LayerNorm::new(&mut s, "n1", d),
            cross: DeformableAttention::new(&mut s, "cross", cfg, 1),
            n2: LayerNorm::new(&mut s, "n2", d),
            ffn: Ffn::new(&mut s, "ffn", d, cfg.ffn_width),
            n3: LayerNorm::new(&mut s, "n3", d),
            kp_head: Linear::zeroed(&mut s, "kp_head", d, KP_WIDTH),
            score_head: Linear::zeroed(&mut s, "score_head", d, 1),
        }
    }

    pub fn forward(
        &self,
        ctx: &mut Ctx,
        embed: &PoseEmbed,
        queries: Var,
        keypoints: Var,
        memory: &Memory,
        base_logits: Var,
        refs: &[[f64; 2]],
    ) -> Result<(Var, LayerPrediction), TensorError> {
        let pos = embed.forward(ctx, keypoints)?;
        let h = prenorm(ctx, &self.n1, queries)?;
        let hp = ctx.g.add(h, pos)?;
        let sa = self.self_attn.forward(ctx, hp, hp, h, None, false)?;
        let q = ctx.g.add(queries, sa)?;
        let h = prenorm(ctx, &self.n2, q)?;
        let hp = ctx.g.add(h, pos)?;
        let ca = self.cross.forward(ctx, hp, refs, &[memory])?;
        let q = ctx.g.add(q, ca)?;
        let h = prenorm(ctx, &self.n3, q)?;
        let f = self.ffn.forward(ctx, h)?;
        let q = ctx.g.add(q, f)?;
        let pred = predict(ctx, &self.kp_head, &self.score_head, q, keypoints, base_logits)?;
        Ok((q, pred))
    }
}

/// One coarse-to-fine step `σ(σ⁻¹(kp) + Δ)`; the score logit is the incoming
/// spatial logit plus a linear correction, so a zero head keeps spatial scores.
fn predict(ctx: &mut Ctx, kp_head: &Linear, score_head: &Linear, q: Var, keypoints: Var, base_logits: Var) -> Result<LayerPrediction, TensorError> {
    let delta = kp_head.forward(ctx, q)?;
    let kp = ctx.g.refine(keypoints, delta, INVERSE_SIGMOID_EPS)?;
    let logit = score_head.forward(ctx, q)?;
    let n = ctx.g.shape(q)[0];
    let correction = ctx.g.reshape(logit, &[n])?;
    let logits = ctx.g.add(base_logits, correction)?;
    Ok(LayerPrediction { keypoints: kp, logits })
}

/// Spatial-stage results for one frame as seen by the temporal stage.
#[derive(Clone, Debug)]
pub struct FrameInput {
    pub memory: Memory,
    pub queries: Var,
    pub keypoints: Var,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TemporalOutput {
    /// Selected query slots per frame, keyframe first.
    pub selected: Vec<Vec<usize>>,
    /// Instance queries per frame (keyframe first) when computed.
    pub instances: Option<Vec<Var>>,
    pub mask: Option<InstanceMask>,
    /// Predictions over the selected keyframe queries, one per decoder layer.
    pub layers: Vec<LayerPrediction>,
    /// Cross-attention reference points used by each decoder layer.
    pub reference_points: Vec<Vec<[f64; 2]>>,
}

impl TemporalOutput {
    pub fn last(&self) -> LayerPrediction {
        *self.layers.last().expect("at least one layer")
    }
}

pub struct TemporalStage {
    pub cfg: TemporalConfig,
    pub attention: AttentionConfig,
    pub instance: InstanceHead,
    pub stpe: Vec<StpeLayer>,
    pub stdme: Vec<StdmeLayer>,
    pub pose_embed: PoseEmbed,
    pub stpd: Vec<StpdLayer>,
    /// Single refinement head used when the cascaded decoder is disabled.
    pub plain_kp_head: Linear,
    pub plain_score_head: Linear,
}

impl TemporalStage {
    pub fn new(init: &mut Init, model: &ModelConfig, cfg: &TemporalConfig) -> Self {
        let a = &model.attention;
        let d = a.d_model;
        let mut s = init.scope("temporal");
        let instance = InstanceHead::new(&mut s, "instance", model.queries, d);
        let stpe = (0..cfg.stpe_layers).map(|i| StpeLayer::new(&mut s, &format!("stpe{i}"), a)).collect();
        let stdme = (0..cfg.stdme_layers).map(|i| StdmeLayer::new(&mut s, &format!("stdme{i}"), a)).collect();
        let pose_embed = PoseEmbed::new(&mut s, "stpd_pose_embed", d);
        let stpd = (0..cfg.stpd_layers).map(|i| StpdLayer::new(&mut s, &format!("stpd{i}"), a)).collect();
        let plain_kp_head = Linear::zeroed(&mut s, "plain_kp_head", d, KP_WIDTH);
        let plain_score_head = Linear::zeroed(&mut s, "plain_score_head", d, 1);
        Self { cfg: cfg.clone(), attention: a.clone(), instance, stpe, stdme, pose_embed, stpd, plain_kp_head, plain_score_head }
    }

    /// Whether instance queries are needed (for the mask or the consistency loss).
    pub fn needs_instances(&self, ic_weight: f64) -> bool {
        self.cfg.use_instance_mask || ic_weight > 0.0
    }

    /// Runs the temporal pipeline for `key` with reference frames `refs`.
    ///
    /// With no references the pose encoder skips cross-attention and the memory
    /// encoder sees copies of the keyframe in every temporal slot.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        key: &FrameInput,
        refs: &[FrameInput],
        threshold: f64,
        want_instances: bool,
    ) -> Result<TemporalOutput, TensorError> {
        self.forward_pinned(ctx, key, refs, threshold, want_instances, None)
    }

    /// As [`Self::forward`], but with decoder reference points supplied instead of
    /// read off the incoming keypoints. Reference points carry no gradient, so
    /// pinning them makes the output a smooth function of every graph input.
    pub fn forward_pinned(
        &self,
        ctx: &mut Ctx,
        key: &FrameInput,
        refs: &[FrameInput],
        threshold: f64,
        want_instances: bool,
        pinned: Option<&[Vec<[f64; 2]>]>,
    ) -> Result<TemporalOutput, TensorError> {
        let frames: Vec<&FrameInput> = std::iter::once(key).chain(refs).collect();
        let selected: Vec<Vec<usize>> = frames.iter().map(|f| pose_query_selection(&f.scores, threshold, self.cfg.min_keep)).collect();
        let mut queries = Vec::with_capacity(frames.len());
        let mut keypoints = Vec::with_capacity(frames.len());
        for (f, sel) in frames.iter().zip(&selected) {
            queries.push(ctx.g.gather_rows(f.queries, sel)?);
            keypoints.push(ctx.g.gather_rows(f.keypoints, sel)?);
        }

        let instances = if want_instances || (self.cfg.use_instance_mask && self.cfg.use_stpe && !refs.is_empty()) {
            let mut v = Vec::with_capacity(frames.len());
            for t in 0..frames.len() {
                v.push(self.instance.forward(ctx, queries[t], keypoints[t], &selected[t])?);
            }
            Some(v)
        } else {
            None
        };
        let mask = match (&instances, self.cfg.use_instance_mask && !refs.is_empty()) {
            (Some(inst), true) => {
                let key_inst = ctx.g.value(inst[0]).clone();
                let ref_inst: Vec<Tensor> = inst[1..].iter().map(|v| ctx.g.value(*v).clone()).collect();
                Some(compute_instance_mask(&key_inst, &ref_inst.iter().collect::<Vec<_>>()))
            }
            _ => None,
        };

        let mut q = queries[0];
        if self.cfg.use_stpe {
            let ref_q = if refs.is_empty() { None } else { Some(ctx.g.concat_rows(&queries[1..])?) };
            let flat_mask = mask.as_ref().map(|m| m.concatenated());
            for layer in &self.stpe {
                q = layer.forward(ctx, q, ref_q, flat_mask.as_deref())?;
            }
        }

        let mut memory = key.memory.clone();
        if self.cfg.use_stdme {
            let ref_mems: Vec<&Memory> = if refs.is_empty() {
                vec![&key.memory; self.attention.frames - 1]
            } else {
                refs.iter().map(|r| &r.memory).collect()
            };
            for layer in &self.stdme {
                memory = layer.forward(ctx, &memory, &ref_mems)?;
            }
        }

        let base: Vec<f64> = selected[0].iter().map(|&i| vepe_tensor::inverse_sigmoid(key.scores[i], INVERSE_SIGMOID_EPS)).collect();
        let base_logits = ctx.g.constant(Tensor::from_vec(base));
        let mut kp = keypoints[0];
        let mut layers = Vec::new();
        let mut reference_points = Vec::new();
        if self.cfg.use_stpd {
            for (i, layer) in self.stpd.iter().enumerate() {
                let points = match pinned {
                    Some(p) => p[i].clone(),
                    None => mean_keypoints(ctx.g.value(kp)),
                };
                let (nq, pred) = layer.forward(ctx, &self.pose_embed, q, kp, &memory, base_logits, &points)?;
                reference_points.push(points);
                q = nq;
                kp = pred.keypoints;
                layers.push(pred);
            }
        } else {
            layers.push(predict(ctx, &self.plain_kp_head, &self.plain_score_head, q, kp, base_logits)?);
        }
        Ok(TemporalOutput { selected, instances, mask, layers, reference_points })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_filters_by_threshold() {
        assert_eq!(pose_query_selection(&[0.9, 0.5, 0.2], 0.3, 1), vec![0, 1]);
        assert_eq!(pose_query_selection(&[0.9, 0.5, 0.2], 0.0, 1), vec![0, 1, 2]);
    }

    #[test]
    fn selection_falls_back_to_top_scores() {
        assert_eq!(pose_query_selection(&[0.1, 0.05, 0.2, 0.15, 0.0, 0.01], 0.3, 3), vec![0, 2, 3]);
        assert_eq!(pose_query_selection(&[0.1, 0.2], 0.9, 5), vec![0, 1]);
    }

    #[test]
    fn diagonal_argmax_mask() {
        let key = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = Tensor::new(&[2, 2], vec![0.9, 0.4358898943540674, 0.2, 0.9797958971132712]).unwrap();
        let m = compute_instance_mask(&key, &[&r]);
        assert_eq!(m.blocks[0], vec![true, false, false, true]);
        assert_eq!(m.links(), vec![vec![0, 1]]);
    }

    #[test]
    fn concatenated_mask_interleaves_blocks_per_row() {
        let key = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = compute_instance_mask(&key, &[&a, &b]);
        assert_eq!(m.concatenated(), vec![true, false, true, true, true, false]);
    }
}
