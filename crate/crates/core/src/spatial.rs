//! Per-frame stage: convolutional feature pyramid, deformable encoder, set-prediction pose decoder.

use vepe_tensor::params::{Ctx, ParamId};
use vepe_tensor::{inverse_sigmoid, Tensor, TensorError, Var, INVERSE_SIGMOID_EPS};

use crate::attention::{DeformableAttention, Memory, MultiHeadAttention};
use crate::config::ModelConfig;
use crate::nn::{add_norm, cell_centres, sine_encoding, Ffn, Init, LayerNorm, Linear};
use crate::skeleton::*;

/// Coarsest backbone stride; input sides must be multiples of it.
pub const MAX_STRIDE: usize = 16;
pub const LEVEL_STRIDES: [usize; 3] = [4, 8, 16];
pub const KP_WIDTH: usize = NUM_JOINTS * 2;

/// Initial score logit, a prior of about 0.1.
pub const SCORE_PRIOR_LOGIT: f64 = -2.2;

/// 3×3 stride-2 convolution followed by GELU.
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl ConvBlock {
    fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.glorot("w", 9 * cin, cout);
        let b = s.zeros("b", &[cout]);
        Self { w, b, cin, cout }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let &[h, w, _] = ctx.g.shape(x) else { unreachable!("image-shaped input") };
        let cols = ctx.g.im2col(x, 3, 2, 1)?;
        let wv = ctx.p(self.w);
        let bv = ctx.p(self.b);
        let y = ctx.g.matmul(cols, wv)?;
        let y = ctx.g.add_row(y, bv)?;
        let y = ctx.g.gelu(y);
        ctx.g.reshape(y, &[h.div_ceil(2), w.div_ceil(2), self.cout])
    }
}

pub struct Backbone {
    pub convs: Vec<ConvBlock>,
    pub proj: Vec<Linear>,
    pub level_embed: ParamId,
    pub d: usize,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.attention.d_model;
        let ch = cfg.backbone_channels;
        let mut s = init.scope("backbone");
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in ch.iter().enumerate() {
            convs.push(ConvBlock::new(&mut s, &format!("conv{i}"), cin, c));
            cin = c;
        }
        let proj = (0..3).map(|l| Linear::new(&mut s, &format!("proj{l}"), ch[l + 1], d)).collect();
        let level_embed = s.zeros("level_embed", &[3, d]);
        Self { convs, proj, level_embed, d }
    }

    /// Levels at strides 4/8/16, projected to `d` channels, with positional encodings added.
    pub fn extract_features(&self, ctx: &mut Ctx, image: &Tensor) -> Result<Memory, TensorError> {
        let &[h, w, c] = image.shape() else {
            return Err(TensorError::Config(format!("image must be H×W×3, got {:?}", image.shape())));
        };
        if c != 3 || h % MAX_STRIDE != 0 || w % MAX_STRIDE != 0 {
            return Err(TensorError::Config(format!("image {h}×{w}×{c} must be 3-channel with sides divisible by {MAX_STRIDE}")));
        }
        let mut x = ctx.g.constant(image.clone());
        let mut maps = Vec::new();
        for conv in &self.convs {
            x = conv.forward(ctx, x)?;
            maps.push(x);
        }
        let embed = ctx.p(self.level_embed);
        let mut parts = Vec::new();
        let mut shapes = Vec::new();
        for (l, &map) in maps[1..].iter().enumerate() {
            let &[lh, lw, lc] = ctx.g.shape(map) else { unreachable!() };
            let flat = ctx.g.reshape(map, &[lh * lw, lc])?;
            let projected = self.proj[l].forward(ctx, flat)?;
            let pe = ctx.g.constant(sine_encoding(&cell_centres(lh, lw), self.d));
            let with_pe = ctx.g.add(projected, pe)?;
            let row = ctx.g.gather_rows(embed, &[l])?;
            parts.push(ctx.g.add_row(with_pe, row)?);
            shapes.push((lh, lw));
        }
        Ok(Memory { tokens: ctx.g.concat_rows(&parts)?, shapes })
    }
}

/// Deformable self-attention over all tokens, then FFN, each post-normalized.
pub struct EncoderLayer {
    pub attn: DeformableAttention,
    pub n1: LayerNorm,
    pub ffn: Ffn,
    pub n2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &ModelConfig) -> Self {
        let a = &cfg.attention;
        let mut s = init.scope(name);
        Self {
            attn: DeformableAttention::new(&mut s, "msda", a, 1),
            n1: LayerNorm::new(&mut s, "n1", a.d_model),
            ffn: Ffn::new(&mut s, "ffn", a.d_model, a.ffn_width),
            n2: LayerNorm::new(&mut s, "n2", a.d_model),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, mem: &Memory) -> Result<Memory, TensorError> {
        let refs = mem.token_refs();
        let a = self.attn.forward(ctx, mem.tokens, &refs, &[mem])?;
        let x = add_norm(ctx, &self.n1, mem.tokens, a)?;
        let f = self.ffn.forward(ctx, x)?;
        let x = add_norm(ctx, &self.n2, x, f)?;
        Ok(Memory { tokens: x, shapes: mem.shapes.clone() })
    }
}

/// Embeds flattened keypoints `[N×30]` into the query width.
pub struct PoseEmbed {
    pub l1: Linear,
    pub l2: Linear,
}

impl PoseEmbed {
    pub fn new(init: &mut Init, name: &str, d: usize) -> Self {
        let mut s = init.scope(name);
        Self { l1: Linear::new(&mut s, "l1", KP_WIDTH, d), l2: Linear::new(&mut s, "l2", d, d) }
    }

    pub fn forward(&self, ctx: &mut Ctx, kp: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(ctx, kp)?;
        let h = ctx.g.gelu(h);
        self.l2.forward(ctx, h)
    }
}

/// Per-layer decoder prediction.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[N×30]`, joint `j` at columns `2j` (x) and `2j+1` (y), normalized.
    pub keypoints: Var,
    /// `[N]` score logits.
    pub logits: Var,
}

/// One cascade step: pose self-attention, deformable feature-to-pose attention,
/// FFN, then keypoint refinement and scoring.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub n1: LayerNorm,
    pub cross: DeformableAttention,
    pub n2: LayerNorm,
    pub ffn: Ffn,
    pub n3: LayerNorm,
    pub kp_head: Linear,
    pub score_head: Linear,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, name: &str, cfg: &crate::config::AttentionConfig) -> Self {
        let d = cfg.d_model;
        let mut s = init.scope(name);
        let layer = Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, cfg.heads),
            n1: LayerNorm::new(&mut s, "n1", d),
            cross: DeformableAttention::new(&mut s, "cross", cfg, 1),
            n2: LayerNorm::new(&mut s, "n2", d),
            ffn: Ffn::new(&mut s, "ffn", d, cfg.ffn_width),
            n3: LayerNorm::new(&mut s, "n3", d),
            kp_head: Linear::zeroed(&mut s, "kp_head", d, KP_WIDTH),
            score_head: Linear::new(&mut s, "score_head", d, 1),
        };
        s.store.value_mut(layer.score_head.b).data_mut()[0] = SCORE_PRIOR_LOGIT;
        layer
    }

    /// Returns the updated queries and this layer's prediction.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        embed: &PoseEmbed,
        queries: Var,
        keypoints: Var,
        memory: &Memory,
    ) -> Result<(Var, LayerPrediction), TensorError> {
        let pos = embed.forward(ctx, keypoints)?;
        let qp = ctx.g.add(queries, pos)?;
        let sa = self.self_attn.forward(ctx, qp, qp, queries, None, false)?;
        let q = add_norm(ctx, &self.n1, queries, sa)?;
        let refs = mean_keypoints(ctx.g.value(keypoints));
        let qc = ctx.g.add(q, pos)?;
        let ca = self.cross.forward(ctx, qc, &refs, &[memory])?;
        let q = add_norm(ctx, &self.n2, q, ca)?;
        let f = self.ffn.forward(ctx, q)?;
        let q = add_norm(ctx, &self.n3, q, f)?;
        let delta = self.kp_head.forward(ctx, q)?;
        let kp = ctx.g.refine(keypoints, delta, INVERSE_SIGMOID_EPS)?;
        let logit = self.score_head.forward(ctx, q)?;
        let n = ctx.g.shape(q)[0];
        let logits = ctx.g.reshape(logit, &[n])?;
        Ok((q, LayerPrediction { keypoints: kp, logits }))
    }
}

/// Reference point of each pose: the mean of its keypoints.
pub fn mean_keypoints(kp: &Tensor) -> Vec<[f64; 2]> {
    let n = kp.shape()[0];
    (0..n)
        .map(|i| {
            let row = kp.row(i);
            let (mut x, mut y) = (0.0, 0.0);
            for j in 0..NUM_JOINTS {
                x += row[2 * j];
                y += row[2 * j + 1];
            }
            [x / NUM_JOINTS as f64, y / NUM_JOINTS as f64]
        })
        .collect()
}

pub struct SpatialDecoder {
    pub query_embed: ParamId,
    /// `[N×2]` logits of each query's initial body centre.
    pub ref_logit: ParamId,
    /// `[30]` logit-space offsets from the centre to each joint.
    pub template: ParamId,
    pub pose_embed: PoseEmbed,
    pub layers: Vec<DecoderLayer>,
}

impl SpatialDecoder {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let d = cfg.attention.d_model;
        let n = cfg.queries;
        let mut s = init.scope("decoder");
        let query_embed = s.uniform("query_embed", &[n, d], 1.0);
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let refs = Tensor::from_fn(&[n, 2], |i| {
            let q = i / 2;
            let p = if i % 2 == 0 { 0.15 + 0.7 * ((q % cols) as f64 + 0.5) / cols as f64 } else { 0.15 + 0.7 * ((q / cols) as f64 + 0.5) / rows as f64 };
            inverse_sigmoid(p, INVERSE_SIGMOID_EPS)
        });
        let ref_logit = s.add("ref_logit", refs);
        // Logit slope at 0.5 is 4; the template is sized for a half-height person.
        let template = s.add("template", Tensor::from_fn(&[KP_WIDTH], |i| 4.0 * 0.5 * REST_POSE[i / 2][i % 2]));
        let pose_embed = PoseEmbed::new(&mut s, "pose_embed", d);
        let layers = (0..cfg.decoder_layers).map(|i| DecoderLayer::new(&mut s, &format!("layer{i}"), &cfg.attention)).collect();
        Self { query_embed, ref_logit, template, pose_embed, layers }
    }

    /// Keypoints before the first layer: `σ(ref_logit + template)`.
    pub fn initial_keypoints(&self, ctx: &mut Ctx) -> Result<Var, TensorError> {
        let expand = ctx.g.constant(Tensor::from_fn(&[2, KP_WIDTH], |i| if i / KP_WIDTH == (i % KP_WIDTH) % 2 { 1.0 } else { 0.0 }));
        let r = ctx.p(self.ref_logit);
        let t = ctx.p(self.template);
        let centres = ctx.g.matmul(r, expand)?;
        let logits = ctx.g.add_row(centres, t)?;
        Ok(ctx.g.sigmoid(logits))
    }

    pub fn forward(&self, ctx: &mut Ctx, memory: &Memory) -> Result<(Var, Vec<LayerPrediction>), TensorError> {
        let mut q = ctx.p(self.query_embed);
        let mut kp = self.initial_keypoints(ctx)?;
        let mut preds = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (nq, pred) = layer.forward(ctx, &self.pose_embed, q, kp, memory)?;
            q = nq;
            kp = pred.keypoints;
            preds.push(pred);
        }
        Ok((q, preds))
    }
}

/// Spatial-stage output for one frame.
#[derive(Clone, Debug)]
pub struct SpatialOutput {
    pub memory: Memory,
    pub queries: Var,
    pub layers: Vec<LayerPrediction>,
}

impl SpatialOutput {
    pub fn last(&self) -> LayerPrediction {
        *self.layers.last().expect("at least one decoder layer")
    }
}

pub struct SpatialStage {
    pub backbone: Backbone,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: SpatialDecoder,
}

impl SpatialStage {
    pub fn new(init: &mut Init, cfg: &ModelConfig) -> Self {
        let mut s = init.scope("spatial");
        let backbone = Backbone::new(&mut s, cfg);
        let encoder = (0..cfg.encoder_layers).map(|i| EncoderLayer::new(&mut s, &format!("encoder{i}"), cfg)).collect();
        let decoder = SpatialDecoder::new(&mut s, cfg);
        Self { backbone, encoder, decoder }
    }

    pub fn encode(&self, ctx: &mut Ctx, memory: Memory) -> Result<Memory, TensorError> {
        let mut mem = memory;
        for layer in &self.encoder {
            mem = layer.forward(ctx, &mem)?;
        }
        Ok(mem)
    }

    pub fn forward(&self, ctx: &mut Ctx, image: &Tensor) -> Result<SpatialOutput, TensorError> {
        let features = self.backbone.extract_features(ctx, image)?;
        let memory = self.encode(ctx, features)?;
        let (queries, layers) = self.decoder.forward(ctx, &memory)?;
        Ok(SpatialOutput { memory, queries, layers })
    }
}

/// 8-bit RGB pixels to a zero-centred `[H×W×3]` tensor.
pub fn image_tensor(pixels: &[u8], height: usize, width: usize) -> Tensor {
    Tensor::new(&[height, width, 3], pixels.iter().map(|&p| (p as f64 / 255.0 - 0.5) * 4.0).collect()).expect("pixel count matches image size")
}
