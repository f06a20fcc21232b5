//! Training loops for the spatial, temporal and joint schedules.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vepe_tensor::optim::AdamW;
use vepe_tensor::params::Ctx;
use vepe_tensor::{sigmoid, Graph, TensorError, Var};

use crate::loss::{self, LossWeights};
use crate::matching::{cost_matrix, hungarian_match, MatchAssignment};
use crate::metrics::{compute_ap, EvalFrame, EvalReport};
use crate::model::{window, CachedFrame, Vepe, SPATIAL_PREFIX};
use crate::skeleton::PersonAnnotation;
use crate::spatial::{LayerPrediction, SpatialOutput};
use crate::synth::VideoClip;
use crate::temporal::{FrameInput, TemporalOutput};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Spatial,
    Temporal,
    Joint,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "spatial" => Some(Self::Spatial),
            "temporal" => Some(Self::Temporal),
            "joint" => Some(Self::Joint),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Spatial => "spatial",
            Self::Temporal => "temporal",
            Self::Joint => "joint",
        }
    }
}

/// Which pipeline depth to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Spatial,
    Temporal,
}

/// Mean per-epoch training loss and the evaluation after that epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub ap: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        match self.ap {
            Some(ap) => format!("epoch={} loss={:.6} ap={:.4}", self.epoch, self.loss, ap),
            None => format!("epoch={} loss={:.6}", self.epoch, self.loss),
        }
    }

    /// Parses a [`EpochRecord::log_line`] line.
    pub fn parse(line: &str) -> Option<Self> {
        let mut epoch = None;
        let mut loss = None;
        let mut ap = None;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "epoch" => epoch = v.parse().ok(),
                "loss" => loss = v.parse().ok(),
                "ap" => ap = Some(v.parse().ok()?),
                _ => return None,
            }
        }
        Some(Self { epoch: epoch?, loss: loss?, ap })
    }
}

fn weights(model: &Vepe) -> LossWeights {
    let l = &model.config.loss;
    LossWeights { kpt: l.kpt, cls: l.cls, ic: l.ic }
}

/// Hungarian assignment of the rows of one prediction layer to `gts`.
pub fn assign(g: &Graph, pred: &LayerPrediction, gts: &[PersonAnnotation], w: LossWeights) -> MatchAssignment {
    let kp = g.value(pred.keypoints);
    let scores: Vec<f64> = g.value(pred.logits).data().iter().map(|&l| sigmoid(l)).collect();
    let cost = cost_matrix(kp.data(), &scores, gts, w.kpt, w.cls);
    hungarian_match(&cost, scores.len(), gts.len())
}

/// Keypoint and classification terms, summed over every supervised layer.
fn layers_loss(g: &mut Graph, layers: &[LayerPrediction], gts: &[PersonAnnotation], w: LossWeights) -> Result<Var, TensorError> {
    let mut total: Option<Var> = None;
    for pred in layers {
        let a = assign(g, pred, gts, w);
        let kpt = loss::keypoint_loss(g, pred.keypoints, &a, gts)?;
        let cls = loss::classification_loss(g, pred.logits, &a)?;
        let l = loss::total_loss(g, w, kpt, cls, None)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(total.expect("at least one layer"))
}

pub fn spatial_loss(model: &Vepe, ctx: &mut Ctx, out: &SpatialOutput, gts: &[PersonAnnotation]) -> Result<Var, TensorError> {
    layers_loss(ctx.g, &out.layers, gts, weights(model))
}

/// Temporal supervision on the keyframe plus the consistency loss over
/// instance queries of the distinct frames in the window.
pub fn temporal_loss(
    model: &Vepe,
    ctx: &mut Ctx,
    out: &TemporalOutput,
    frames: &[(usize, &FrameInput, &[PersonAnnotation])],
    rng: &mut ChaCha8Rng,
) -> Result<Var, TensorError> {
    let w = weights(model);
    let mut total = layers_loss(ctx.g, &out.layers, frames[0].2, w)?;
    if let (Some(instances), true) = (&out.instances, w.ic > 0.0) {
        let mut seen = Vec::new();
        let mut kept = Vec::new();
        let mut labelled = Vec::new();
        for (k, (frame, input, gts)) in frames.iter().enumerate() {
            if seen.contains(frame) {
                continue;
            }
            seen.push(*frame);
            let sel = &out.selected[k];
            let kp = ctx.g.value(input.keypoints);
            let rows: Vec<f64> = sel.iter().flat_map(|&i| kp.row(i).to_vec()).collect();
            let scores: Vec<f64> = sel.iter().map(|&i| input.scores[i]).collect();
            let a = hungarian_match(&cost_matrix(&rows, &scores, gts, w.kpt, w.cls), sel.len(), gts.len());
            labelled.push(a.pairs.iter().map(|&(p, gi)| (p, gts[gi].track_id)).collect::<Vec<_>>());
            kept.push(instances[k]);
        }
        let batch = loss::build_triplets(&labelled, model.config.loss.margin, rng);
        if !batch.is_empty() {
            let ic = loss::instance_consistency_loss(ctx.g, &kept, &batch)?;
            let scaled = ctx.g.scale(ic, w.ic);
            total = ctx.g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Gradient sums over a batch, indexed by parameter.
struct Accumulator {
    sums: Vec<Option<Vec<f64>>>,
    count: usize,
}

impl Accumulator {
    fn new(params: usize) -> Self {
        Self { sums: vec![None; params], count: 0 }
    }

    fn add(&mut self, ctx: &Ctx) {
        for (id, grad) in ctx.param_grads() {
            match &mut self.sums[id.index()] {
                Some(s) => s.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                slot => *slot = Some(grad),
            }
        }
        self.count += 1;
    }

    fn drain(&mut self, model: &Vepe) -> Vec<(vepe_tensor::params::ParamId, Vec<f64>)> {
        let inv = 1.0 / self.count.max(1) as f64;
        let out = model
            .store
            .ids()
            .filter_map(|id| self.sums[id.index()].take().map(|mut g| {
                g.iter_mut().for_each(|v| *v *= inv);
                (id, g)
            }))
            .collect();
        self.count = 0;
        out
    }
}

/// Evaluates `clips` at the configured tau and selection threshold.
pub fn evaluate(model: &Vepe, clips: &[VideoClip], mode: EvalMode, threshold: f64) -> Result<EvalReport, TensorError> {
    let mut frames = Vec::new();
    for clip in clips {
        let cache = model.spatial_clip(clip)?;
        for t in 0..clip.len() {
            let predictions = match mode {
                EvalMode::Spatial => cache[t].predictions(),
                EvalMode::Temporal => model.temporal_frame(&cache, t, threshold)?.predictions,
            };
            frames.push(EvalFrame { predictions, ground_truth: clip.annotations[t].clone(), image_size: clip.width });
        }
    }
    Ok(compute_ap(&frames, model.config.eval.tau, clips.len()))
}

pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
}

/// Runs `epochs` passes over every `(clip, frame)` sample of `clips`.
///
/// Temporal mode freezes the spatial stage and reads its outputs from a cache
/// built once up front. `on_epoch` receives each finished epoch.
pub fn train(
    model: &mut Vepe,
    clips: &[VideoClip],
    val: &[VideoClip],
    mode: Mode,
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TensorError> {
    let spatial_trainable = mode != Mode::Temporal;
    model.store.set_trainable(SPATIAL_PREFIX, spatial_trainable);
    model.store.set_trainable(crate::model::TEMPORAL_PREFIX, mode != Mode::Spatial);

    let o = &model.config.optim;
    let mut opt = AdamW::new(o.lr, o.weight_decay);
    opt.clip_norm = (o.clip_norm > 0.0).then_some(o.clip_norm);
    let batch = o.batch_size;
    let threshold = model.config.temporal.pqs_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x7472_6169_6e00);
    let samples: Vec<(usize, usize)> = clips.iter().enumerate().flat_map(|(c, clip)| (0..clip.len()).map(move |t| (c, t))).collect();

    let cache: Vec<Vec<CachedFrame>> = if mode == Mode::Temporal {
        clips.iter().map(|c| model.spatial_clip(c)).collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };
    let eval_mode = if mode == Mode::Spatial { EvalMode::Spatial } else { EvalMode::Temporal };

    let mut records = Vec::new();
    let mut acc = Accumulator::new(model.store.len());
    for epoch in 1..=epochs {
        let mut order = samples.clone();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            for &(c, t) in chunk {
                let clip = &clips[c];
                let mut g = Graph::new();
                let mut ctx = Ctx::new(&mut g, &model.store, true);
                let l = match mode {
                    Mode::Spatial => {
                        let out = model.spatial.forward(&mut ctx, &Vepe::frame_tensor(clip, t))?;
                        spatial_loss(model, &mut ctx, &out, &clip.annotations[t])?
                    }
                    Mode::Temporal => {
                        let refs = window(t, clip.len(), model.config.model.attention.frames - 1);
                        let inputs: Vec<FrameInput> = std::iter::once(t).chain(refs.iter().copied()).map(|f| cache[c][f].input(&mut ctx)).collect();
                        temporal_step(model, &mut ctx, clip, t, &refs, &inputs, threshold, &mut rng)?
                    }
                    Mode::Joint => {
                        let refs = window(t, clip.len(), model.config.model.attention.frames - 1);
                        let mut inputs = Vec::new();
                        let mut key_loss = None;
                        for f in std::iter::once(t).chain(refs.iter().copied()) {
                            let out = model.spatial.forward(&mut ctx, &Vepe::frame_tensor(clip, f))?;
                            if key_loss.is_none() {
                                key_loss = Some(spatial_loss(model, &mut ctx, &out, &clip.annotations[f])?);
                            }
                            let last = out.last();
                            let scores = ctx.g.value(last.logits).data().iter().map(|&l| sigmoid(l)).collect();
                            inputs.push(FrameInput { memory: out.memory, queries: out.queries, keypoints: last.keypoints, scores });
                        }
                        let tl = temporal_step(model, &mut ctx, clip, t, &refs, &inputs, threshold, &mut rng)?;
                        ctx.g.add(tl, key_loss.expect("keyframe first"))?
                    }
                };
                let value = ctx.g.value(l).data()[0];
                if !value.is_finite() {
                    return Err(TensorError::NonFinite { op: format!("training loss at epoch {epoch}"), index: 0 });
                }
                loss_sum += value;
                ctx.g.backward(l)?;
                acc.add(&ctx);
            }
            let grads = acc.drain(model);
            opt.step(&mut model.store, &grads);
        }
        let ap = if val.is_empty() { None } else { Some(evaluate(model, val, eval_mode, threshold)?.mean) };
        let rec = EpochRecord { epoch, loss: loss_sum / samples.len().max(1) as f64, ap };
        on_epoch(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome { records })
}

#[allow(clippy::too_many_arguments)]
fn temporal_step(
    model: &Vepe,
    ctx: &mut Ctx,
    clip: &VideoClip,
    t: usize,
    refs: &[usize],
    inputs: &[FrameInput],
    threshold: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var, TensorError> {
    let want = model.config.loss.ic > 0.0;
    let out = model.temporal.forward(ctx, &inputs[0], &inputs[1..], threshold, want)?;
    let frames: Vec<(usize, &FrameInput, &[PersonAnnotation])> =
        std::iter::once(t).chain(refs.iter().copied()).zip(inputs).map(|(f, inp)| (f, inp, clip.annotations[f].as_slice())).collect();
    temporal_loss(model, ctx, &out, &frames, rng)
}

/// Instance-link accuracy: for each keyframe row matched to a person that also
/// appears in an adjacent reference frame, whether its argmax link lands on a
/// reference row matched to the same track.
pub fn link_accuracy(model: &Vepe, clips: &[VideoClip], threshold: f64) -> Result<(usize, usize), TensorError> {
    let w = weights(model);
    let (mut correct, mut total) = (0, 0);
    for clip in clips {
        let cache = model.spatial_clip(clip)?;
        let matched = |f: usize, sel: &[usize]| -> Vec<Option<u32>> {
            let kp = &cache[f].keypoints;
            let rows: Vec<f64> = sel.iter().flat_map(|&i| kp.row(i).to_vec()).collect();
            let scores: Vec<f64> = sel.iter().map(|&i| cache[f].scores[i]).collect();
            let gts = &clip.annotations[f];
            let a = hungarian_match(&cost_matrix(&rows, &scores, gts, w.kpt, w.cls), sel.len(), gts.len());
            a.gt_of(sel.len()).into_iter().map(|g| g.map(|g| gts[g].track_id)).collect()
        };
        for t in 0..clip.len() {
            let crate::model::InstanceLinks { refs, selected, links, .. } = model.instance_links(&cache, t, threshold)?;
            let key_tracks = matched(t, &selected[0]);
            for (k, &r) in refs.iter().enumerate() {
                if r == t {
                    continue;
                }
                let ref_tracks = matched(r, &selected[k + 1]);
                for (row, track) in key_tracks.iter().enumerate() {
                    let Some(track) = track else { continue };
                    if !ref_tracks.contains(&Some(*track)) {
                        continue;
                    }
                    total += 1;
                    correct += (ref_tracks[links[k][row]] == Some(*track)) as usize;
                }
            }
        }
    }
    Ok((correct, total))
}

/// Mean training loss of one pass, without updates; used by tests.
pub fn mean_loss(model: &Vepe, clips: &[VideoClip]) -> Result<f64, TensorError> {
    let mut sum = 0.0;
    let mut n = 0;
    for clip in clips {
        for t in 0..clip.len() {
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &model.store, false);
            let out = model.spatial.forward(&mut ctx, &Vepe::frame_tensor(clip, t))?;
            let l = spatial_loss(model, &mut ctx, &out, &clip.annotations[t])?;
            sum += ctx.g.value(l).data()[0];
            n += 1;
        }
    }
    Ok(sum / n.max(1) as f64)
}
