//! Finite-difference checks for every differentiable op and the composed
//! attention and temporal blocks.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vepe_tensor::gradcheck::{GradCheck, GradReport};
use vepe_tensor::params::{Ctx, ParamStore};
use vepe_tensor::{CustomOp, DeformLayout, Graph, Tensor, TensorError, Var};

use crate::attention::{DeformableAttention, Memory, MultiHeadAttention};
use crate::config::{AttentionConfig, ModelConfig, TemporalConfig};
use crate::loss::{instance_consistency_loss, keypoint_loss, InstanceRef, Triplet, TripletBatch};
use crate::matching::MatchAssignment;
use crate::nn::Init;
use crate::skeleton::{PersonAnnotation, NUM_JOINTS};
use crate::spatial::{mean_keypoints, PoseEmbed, KP_WIDTH};
use crate::temporal::{FrameInput, InstanceHead, StdmeLayer, StpdLayer, StpeLayer, TemporalStage};

/// Tolerance for smooth ops.
pub const TOL: f64 = 1e-4;
/// Tolerance for anything that passes through bilinear sampling.
pub const TOL_SAMPLING: f64 = 1e-3;

type CaseFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>>;

/// One named check: a function of its inputs plus the inputs themselves.
pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    pub sample: Option<usize>,
    pub f: CaseFn,
    pub inputs: Vec<Tensor>,
}

impl Case {
    fn new(name: &'static str, tol: f64, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var, TensorError> + 'static) -> Self {
        Self { name, tol, sample: None, f: Box::new(f), inputs }
    }

    fn sampled(mut self, n: usize) -> Self {
        self.sample = Some(n);
        self
    }

    pub fn run(&self) -> Result<GradReport, TensorError> {
        let mut check = GradCheck::new(self.name, self.tol);
        check.sample = self.sample;
        check.run(&self.f, &self.inputs)
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn randn(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, 1.0, &mut self.0)
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, &mut self.0)
    }
}

/// Small attention geometry that keeps the composed checks fast.
pub fn small_attention() -> AttentionConfig {
    AttentionConfig { d_model: 8, heads: 2, levels: 3, points: 2, frames: 3, ffn_width: 12 }
}

const SHAPES: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];
const TOKENS: usize = 21;
const QUERIES: usize = 3;

/// Builds parameters with `build`, then perturbs every entry so zero-initialized
/// heads also carry gradient.
fn perturbed<T>(seed: u64, build: impl FnOnce(&mut Init) -> T) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = {
        let mut init = Init::new(&mut store, &mut rng, "");
        build(&mut init)
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let noise = Tensor::randn(store.value(id).shape(), 0.2, &mut rng);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    (store, block)
}

fn memory(v: Var) -> Memory {
    Memory { tokens: v, shapes: SHAPES.to_vec() }
}

fn op_cases(r: &mut Gen) -> Vec<Case> {
    let a = r.randn(&[3, 4]);
    let b = r.randn(&[3, 4]);
    let ab = || vec![a.clone(), b.clone()];
    let targets = [1.0, 0.0, 0.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let mask: Vec<bool> = (0..12).map(|i| i % 3 != 1).collect();
    let layout = Arc::new(DeformLayout::stacked(2, 2, &[(4, 5), (2, 3)], 2));
    let s = layout.samples();
    let tokens = layout.tokens();
    let refs = vec![[0.3, 0.6], [0.71, 0.22], [0.5, 0.5]];
    vec![
        Case::new("matmul", TOL, vec![r.randn(&[4, 5]), r.randn(&[5, 3])], |g, x| g.matmul(x[0], x[1])),
        Case::new("softmax", TOL, vec![r.randn(&[2, 3, 4])], |g, x| {
            let parts = [g.softmax(x[0], 0)?, g.softmax(x[0], 1)?, g.softmax(x[0], 2)?];
            let s = g.add(parts[0], parts[1])?;
            g.add(s, parts[2])
        }),
        Case::new("add", TOL, ab(), |g, x| g.add(x[0], x[1])),
        Case::new("sub", TOL, ab(), |g, x| g.sub(x[0], x[1])),
        Case::new("mul", TOL, ab(), |g, x| g.mul(x[0], x[1])),
        Case::new("scale", TOL, ab(), |g, x| Ok(g.scale(x[0], -2.5))),
        Case::new("add_row", TOL, vec![r.randn(&[3, 4]), r.randn(&[4])], |g, x| g.add_row(x[0], x[1])),
        Case::new("transpose", TOL, ab(), |g, x| g.transpose(x[0])),
        Case::new("reshape", TOL, ab(), |g, x| g.reshape(x[0], &[2, 6])),
        Case::new("concat_rows", TOL, ab(), |g, x| g.concat_rows(&[x[0], x[1], x[0]])),
        Case::new("gather_rows", TOL, ab(), |g, x| g.gather_rows(x[0], &[2, 0, 2, 1])),
        Case::new("abs", TOL, ab(), |g, x| Ok(g.abs(x[0]))),
        Case::new("relu", TOL, ab(), |g, x| Ok(g.relu(x[0]))),
        Case::new("gelu", TOL, ab(), |g, x| Ok(g.gelu(x[0]))),
        Case::new("sigmoid", TOL, ab(), |g, x| Ok(g.sigmoid(x[0]))),
        Case::new("inverse_sigmoid", TOL, vec![r.uniform(&[6], 0.05, 0.95)], |g, x| Ok(g.inverse_sigmoid(x[0], 1e-5))),
        Case::new("layer_norm", TOL, vec![r.randn(&[3, 5]), r.randn(&[5]), r.randn(&[5])], |g, x| g.layer_norm(x[0], x[1], x[2])),
        Case::new("sum", TOL, ab(), |g, x| Ok(g.sum(x[0]))),
        Case::new("mean", TOL, ab(), |g, x| Ok(g.mean(x[0]))),
        Case::new("row_dot", TOL, ab(), |g, x| g.row_dot(x[0], x[1])),
        Case::new("l2_normalize_rows", TOL, ab(), |g, x| g.l2_normalize_rows(x[0])),
        Case::new("bce_with_logits", TOL, ab(), move |g, x| g.bce_with_logits(x[0], &targets)),
        Case::new("refine", TOL, vec![r.uniform(&[6], 0.05, 0.95), r.randn(&[6])], |g, x| g.refine(x[0], x[1], 1e-5)),
        Case::new("bilinear_sample", TOL_SAMPLING, vec![r.randn(&[5, 6, 3]), r.uniform(&[7, 2], -0.7, 5.2)], |g, x| {
            g.bilinear_sample(x[0], x[1])
        }),
        Case::new("deform_sample", TOL_SAMPLING, vec![r.randn(&[tokens, 4]), r.uniform(&[3, 2 * s * 2], -1.3, 1.3), r.randn(&[3, 2 * s])], move |g, x| {
            g.deform_sample(x[0], &refs, x[1], x[2], layout.clone())
        }),
        Case::new("attention", TOL, vec![r.randn(&[3, 4]), r.randn(&[4, 4]), r.randn(&[4, 4])], move |g, x| {
            g.attention(x[0], x[1], x[2], 2, Some(&mask), false)
        }),
        Case::new("im2col", TOL, vec![r.randn(&[5, 6, 2]), r.randn(&[18, 3])], |g, x| {
            let cols = g.im2col(x[0], 3, 2, 1)?;
            g.matmul(cols, x[1])
        }),
    ]
}

fn block_cases(r: &mut Gen) -> Vec<Case> {
    let cfg = small_attention();
    let d = cfg.d_model;
    let mut cases = Vec::new();

    let (store, mha) = perturbed(1, |i| MultiHeadAttention::new(i, "mha", d, cfg.heads));
    cases.push(Case::new("block.mha", TOL, vec![r.randn(&[QUERIES, d]), r.randn(&[5, d])], move |g, x| {
        let mut ctx = Ctx::new(g, &store, false);
        mha.forward(&mut ctx, x[0], x[1], x[1], None, false)
    }));

    let refs = vec![[0.3, 0.6], [0.8, 0.25], [0.5, 0.5]];
    let (store, msda) = perturbed(2, |i| DeformableAttention::new(i, "msda", &cfg, 1));
    let r1 = refs.clone();
    cases.push(
        Case::new("block.msda", TOL_SAMPLING, vec![r.randn(&[QUERIES, d]), r.randn(&[TOKENS, d])], move |g, x| {
            let mut ctx = Ctx::new(g, &store, false);
            msda.forward(&mut ctx, x[0], &r1, &[&memory(x[1])])
        })
        .sampled(40),
    );

    let (store, tmsda) = perturbed(3, |i| DeformableAttention::new(i, "tmsda", &cfg, 3));
    let r2 = refs.clone();
    cases.push(
        Case::new(
            "block.tmsda",
            TOL_SAMPLING,
            vec![r.randn(&[QUERIES, d]), r.randn(&[TOKENS, d]), r.randn(&[TOKENS, d]), r.randn(&[TOKENS, d])],
            move |g, x| {
                let mems = [memory(x[1]), memory(x[2]), memory(x[3])];
                let mut ctx = Ctx::new(g, &store, false);
                tmsda.forward(&mut ctx, x[0], &r2, &[&mems[0], &mems[1], &mems[2]])
            },
        )
        .sampled(30),
    );

    let (store, stpe) = perturbed(4, |i| StpeLayer::new(i, "stpe", &cfg));
    let mask: Vec<bool> = (0..QUERIES * 2 * QUERIES).map(|i| i % 4 != 2).collect();
    cases.push(Case::new("block.stpe", TOL, vec![r.randn(&[QUERIES, d]), r.randn(&[2 * QUERIES, d])], move |g, x| {
        let mut ctx = Ctx::new(g, &store, false);
        stpe.forward(&mut ctx, x[0], Some(x[1]), Some(&mask))
    }));

    let (store, stdme) = perturbed(5, |i| StdmeLayer::new(i, "stdme", &cfg));
    cases.push(
        Case::new("block.stdme", TOL_SAMPLING, vec![r.randn(&[TOKENS, d]), r.randn(&[TOKENS, d]), r.randn(&[TOKENS, d])], move |g, x| {
            let mems = [memory(x[0]), memory(x[1]), memory(x[2])];
            let mut ctx = Ctx::new(g, &store, false);
            Ok(stdme.forward(&mut ctx, &mems[0], &[&mems[1], &mems[2]])?.tokens)
        })
        .sampled(25),
    );

    let (store, (stpd, embed)) = perturbed(6, |i| (StpdLayer::new(i, "stpd", &cfg), PoseEmbed::new(i, "embed", d)));
    let mix = r.randn(&[KP_WIDTH + 1, d]);
    let kp0 = r.uniform(&[QUERIES, KP_WIDTH], 0.2, 0.8);
    let points = mean_keypoints(&kp0);
    cases.push(
        Case::new(
            "block.stpd",
            TOL_SAMPLING,
            vec![r.randn(&[QUERIES, d]), kp0, r.randn(&[TOKENS, d]), r.randn(&[QUERIES])],
            move |g, x| {
                let mem = memory(x[2]);
                let mut ctx = Ctx::new(g, &store, false);
                let (q, pred) = stpd.forward(&mut ctx, &embed, x[0], x[1], &mem, x[3], &points)?;
                mix_outputs(ctx.g, q, pred.keypoints, pred.logits, &mix)
            },
        )
        .sampled(30),
    );

    let (store, head) = perturbed(7, |i| InstanceHead::new(i, "instance", 6, d));
    cases.push(Case::new("block.instance_head", TOL, vec![r.randn(&[QUERIES, d]), r.uniform(&[QUERIES, KP_WIDTH], 0.2, 0.8)], move |g, x| {
        let mut ctx = Ctx::new(g, &store, false);
        head.forward(&mut ctx, x[0], x[1], &[4, 0, 2])
    }));

    let model = ModelConfig { queries: 6, attention: cfg.clone(), ..ModelConfig::default() };
    let (store, stage) = perturbed(8, |i| TemporalStage::new(i, &model, &TemporalConfig { min_keep: 3, ..TemporalConfig::default() }));
    let scores = [vec![0.9, 0.1, 0.7, 0.2, 0.8, 0.05], vec![0.6, 0.95, 0.1, 0.3, 0.2, 0.7], vec![0.1, 0.2, 0.9, 0.8, 0.85, 0.3]];
    let mix = r.randn(&[KP_WIDTH + 1, d]);
    let mut inputs = Vec::new();
    for _ in 0..3 {
        inputs.push(r.randn(&[6, d]));
        inputs.push(r.uniform(&[6, KP_WIDTH], 0.2, 0.8));
        inputs.push(r.randn(&[TOKENS, d]));
    }
    let run = move |g: &mut Graph, x: &[Var], pinned: Option<&[Vec<[f64; 2]>]>| {
        let frames: Vec<FrameInput> = (0..3)
            .map(|f| FrameInput { queries: x[3 * f], keypoints: x[3 * f + 1], memory: memory(x[3 * f + 2]), scores: scores[f].clone() })
            .collect();
        let mut ctx = Ctx::new(g, &store, false);
        stage.forward_pinned(&mut ctx, &frames[0], &frames[1..], 0.5, false, pinned)
    };
    let points = {
        let mut g = Graph::new();
        let x: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        run(&mut g, &x, None).expect("unpinned temporal forward").reference_points
    };
    cases.push(
        Case::new("block.temporal_stage", TOL_SAMPLING, inputs, move |g, x| {
            let out = run(g, x, Some(&points))?;
            let last = out.last();
            let (kp, logits) = (last.keypoints, last.logits);
            let q = g.constant(Tensor::zeros(&[g.shape(kp)[0], mix.shape()[1]]));
            mix_outputs(g, q, kp, logits, &mix)
        })
        .sampled(12),
    );

    cases.push(Case::new("loss.keypoint", TOL, vec![r.uniform(&[3, KP_WIDTH], 0.1, 0.9)], |g, x| {
        let gts = vec![annotation(1, 0.3, &[2, 5]), annotation(2, 0.6, &[])];
        let assignment = MatchAssignment { pairs: vec![(0, 1), (2, 0)], unmatched: vec![1] };
        keypoint_loss(g, x[0], &assignment, &gts)
    }));

    cases.push(Case::new("loss.instance_consistency", TOL, vec![r.randn(&[3, 5]), r.randn(&[3, 5])], |g, x| {
        let at = |frame, row| InstanceRef { frame, row };
        let batch = TripletBatch {
            triplets: vec![
                Triplet { anchor: at(0, 0), positive: at(1, 0), negative: at(1, 2) },
                Triplet { anchor: at(0, 1), positive: at(1, 1), negative: at(0, 2) },
                Triplet { anchor: at(1, 2), positive: at(0, 2), negative: at(1, 0) },
            ],
            margin: 2.0,
        };
        instance_consistency_loss(g, &[x[0], x[1]], &batch)
    }));
    cases
}

/// Folds queries, keypoints and logits into one `[n×d]` output so every part
/// reaches the projection.
fn mix_outputs(g: &mut Graph, q: Var, kp: Var, logits: Var, mix: &Tensor) -> Result<Var, TensorError> {
    let n = g.shape(kp)[0];
    let l = g.reshape(logits, &[n, 1])?;
    let l = g.transpose(l)?;
    let kp_t = g.transpose(kp)?;
    let joined = g.concat_rows(&[kp_t, l])?;
    let joined = g.transpose(joined)?;
    let m = g.constant(mix.clone());
    let folded = g.matmul(joined, m)?;
    g.add(q, folded)
}

fn annotation(track_id: u32, offset: f64, hidden: &[usize]) -> PersonAnnotation {
    let mut keypoints = [[0.0; 2]; NUM_JOINTS];
    let mut visible = [true; NUM_JOINTS];
    for (j, kp) in keypoints.iter_mut().enumerate() {
        *kp = [offset + 0.01 * j as f64, 0.8 - offset * 0.5 - 0.02 * j as f64];
    }
    for &j in hidden {
        visible[j] = false;
    }
    PersonAnnotation { track_id, keypoints, visible }
}

/// A square op whose backward is wrong at one index; the suite must flag it.
struct Corrupted;

impl CustomOp for Corrupted {
    fn name(&self) -> &str {
        "square_with_wrong_backward"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
        Tensor::new(inputs[0].shape(), inputs[0].data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let mut g: Vec<f64> = inputs[0].data().iter().zip(grad).map(|(x, g)| 2.0 * x * g).collect();
        g[3] *= 1.5;
        vec![g]
    }
}

pub fn corrupted_case() -> Case {
    let op: Arc<dyn CustomOp> = Arc::new(Corrupted);
    let x = Tensor::rand_uniform(&[6], 0.5, 1.5, &mut ChaCha8Rng::seed_from_u64(23));
    Case::new("fixture.corrupted_backward", TOL, vec![x], move |g, x| g.custom(x, op.clone()))
}

/// Every op case followed by the composed blocks.
pub fn suite() -> Vec<Case> {
    let mut r = Gen(ChaCha8Rng::seed_from_u64(0x5eed));
    let mut cases = op_cases(&mut r);
    cases.extend(block_cases(&mut r));
    cases
}

