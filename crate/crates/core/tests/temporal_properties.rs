mod common;

use common::temporal::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vepe::config::TemporalConfig;
use vepe::gradsuite::small_attention;
use vepe::nn::Init;
use vepe::temporal::{compute_instance_mask, pose_query_selection, FrameInput, StpeLayer};
use vepe_tensor::params::{Ctx, ParamStore};
use vepe_tensor::{Graph, Tensor, INVERSE_SIGMOID_EPS};

#[test]
fn zero_offset_heads_return_input_keypoints_through_every_decoder_layer() {
    let cfg = TemporalConfig { min_keep: 2, ..TemporalConfig::default() };
    assert_eq!(cfg.stpd_layers, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..10 {
        let (store, stage) = stage_with_zero_offsets(seed, &cfg);
        let d = stage.attention.d_model;
        let frames: Vec<Frame> = (0..3).map(|_| random_frame(&mut rng, d)).collect();
        let mut g = Graph::new();
        let inputs: Vec<FrameInput> = frames.iter().map(|f| input(&mut g, f)).collect();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let out = stage.forward(&mut ctx, &inputs[0], &inputs[1..], cfg.pqs_threshold, false).unwrap();
        assert_eq!(out.layers.len(), 3);
        let sel = &out.selected[0];
        for layer in &out.layers {
            let kp = g.value(layer.keypoints);
            for (r, &slot) in sel.iter().enumerate() {
                assert_eq!(kp.row(r), frames[0].keypoints.row(slot), "seed {seed}");
            }
            // Score heads start at zero as well, so spatial scores pass through.
            for (r, &slot) in sel.iter().enumerate() {
                let logit = g.value(layer.logits).data()[r];
                assert_eq!(logit, vepe_tensor::inverse_sigmoid(frames[0].scores[slot], INVERSE_SIGMOID_EPS));
            }
        }
    }
}

#[test]
fn single_frame_forward_keeps_the_fixed_point() {
    let cfg = TemporalConfig { min_keep: 3, ..TemporalConfig::default() };
    let (store, stage) = stage_with_zero_offsets(5, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_frame(&mut rng, stage.attention.d_model);
    let mut g = Graph::new();
    let key = input(&mut g, &f);
    let mut ctx = Ctx::new(&mut g, &store, false);
    let out = stage.forward(&mut ctx, &key, &[], cfg.pqs_threshold, true).unwrap();
    assert!(out.mask.is_none());
    assert_eq!(out.instances.as_ref().map(Vec::len), Some(1));
    let kp = g.value(out.last().keypoints);
    for (r, &slot) in out.selected[0].iter().enumerate() {
        assert_eq!(kp.row(r), f.keypoints.row(slot));
    }
}

fn stpe_layer(seed: u64) -> (ParamStore, StpeLayer) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = StpeLayer::new(&mut Init::new(&mut store, &mut rng, ""), "stpe", &small_attention());
    (store, layer)
}

fn run_stpe(store: &ParamStore, layer: &StpeLayer, key: &Tensor, refs: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let mut g = Graph::new();
    let k = g.constant(key.clone());
    let r = g.constant(refs.clone());
    let mut ctx = Ctx::new(&mut g, store, false);
    let y = layer.forward(&mut ctx, k, Some(r), mask).unwrap();
    g.value(y).clone()
}

fn unit_rows(t: &Tensor) -> Tensor {
    let d = t.shape()[1];
    Tensor::from_fn(t.shape(), |i| {
        let row = t.row(i / d);
        t.data()[i] / row.iter().map(|v| v * v).sum::<f64>().sqrt()
    })
}

#[test]
fn masked_out_reference_rows_never_influence_the_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for seed in 0..20 {
        let (store, layer) = stpe_layer(seed);
        let (nk, nr, d) = (rng.random_range(1..6), rng.random_range(2..7), 8);
        let key = Tensor::randn(&[nk, d], 1.0, &mut rng);
        let refs = Tensor::randn(&[nr, d], 1.0, &mut rng);
        let mask = compute_instance_mask(&unit_rows(&key), &[&unit_rows(&refs)]);
        let flat = mask.concatenated();
        assert!((0..nk).all(|i| flat[i * nr..(i + 1) * nr].iter().filter(|&&b| b).count() == 1));
        let before = run_stpe(&store, &layer, &key, &refs, Some(&flat));

        let linked: Vec<bool> = (0..nr).map(|j| (0..nk).any(|i| flat[i * nr + j])).collect();
        let mut scrambled = refs.clone();
        for j in (0..nr).filter(|&j| !linked[j]) {
            for v in &mut scrambled.data_mut()[j * d..(j + 1) * d] {
                *v = rng.random_range(-50.0..50.0);
            }
        }
        assert_eq!(run_stpe(&store, &layer, &key, &scrambled, Some(&flat)), before, "seed {seed}");
    }
}

#[test]
fn encoder_is_equivariant_to_key_order_and_invariant_to_reference_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for seed in 0..20 {
        let (store, layer) = stpe_layer(seed);
        let (nk, nr, d) = (5, 6, 8);
        let key = Tensor::randn(&[nk, d], 1.0, &mut rng);
        let refs = Tensor::randn(&[nr, d], 1.0, &mut rng);
        let mask: Vec<bool> = (0..nk * nr).map(|_| rng.random_bool(0.6)).collect();
        let base = run_stpe(&store, &layer, &key, &refs, Some(&mask));

        let mut pk: Vec<usize> = (0..nk).collect();
        let mut pr: Vec<usize> = (0..nr).collect();
        pk.shuffle(&mut rng);
        pr.shuffle(&mut rng);
        let key_p = Tensor::from_fn(&[nk, d], |i| key.data()[pk[i / d] * d + i % d]);
        let refs_p = Tensor::from_fn(&[nr, d], |i| refs.data()[pr[i / d] * d + i % d]);
        let mask_p: Vec<bool> = (0..nk * nr).map(|i| mask[pk[i / nr] * nr + pr[i % nr]]).collect();
        let out = run_stpe(&store, &layer, &key_p, &refs_p, Some(&mask_p));
        for i in 0..nk {
            for c in 0..d {
                let diff = (out.data()[i * d + c] - base.data()[pk[i] * d + c]).abs();
                assert!(diff < 1e-12, "seed {seed}: row {i} differs by {diff}");
            }
        }
    }
}

#[test]
fn selection_keeps_every_passing_query_and_at_least_min_keep() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..1000 {
        let n = rng.random_range(0..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let threshold = rng.random_range(0.0..1.0);
        let min_keep = rng.random_range(0..8);
        let sel = pose_query_selection(&scores, threshold, min_keep);
        assert!(sel.windows(2).all(|w| w[0] < w[1]));
        assert!(sel.len() >= min_keep.min(n));
        let passing = scores.iter().filter(|&&s| s >= threshold).count();
        assert_eq!(sel.len(), passing.max(min_keep.min(n)));
        // Anything kept below the threshold outranks everything dropped.
        let floor = sel.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        assert!((0..n).filter(|i| !sel.contains(i)).all(|i| scores[i] <= floor));
    }
}
