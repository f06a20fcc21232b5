//! Random spatial-stage outputs and temporal stages with zero-initialized heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vepe::attention::Memory;
use vepe::config::{ModelConfig, TemporalConfig};
use vepe::gradsuite::small_attention;
use vepe::nn::Init;
use vepe::spatial::KP_WIDTH;
use vepe::temporal::{FrameInput, TemporalStage};
use vepe_tensor::params::ParamStore;
use vepe_tensor::{Graph, Tensor};

pub const SHAPES: [(usize, usize); 3] = [(4, 4), (2, 2), (1, 1)];
pub const TOKENS: usize = 21;
pub const QUERIES: usize = 8;

pub struct Frame {
    pub queries: Tensor,
    pub keypoints: Tensor,
    pub memory: Tensor,
    pub scores: Vec<f64>,
}

pub fn random_frame(rng: &mut ChaCha8Rng, d: usize) -> Frame {
    Frame {
        queries: Tensor::randn(&[QUERIES, d], 1.0, rng),
        keypoints: Tensor::rand_uniform(&[QUERIES, KP_WIDTH], 0.02, 0.98, rng),
        memory: Tensor::randn(&[TOKENS, d], 1.0, rng),
        scores: (0..QUERIES).map(|_| rng.random_range(0.0..1.0)).collect(),
    }
}

pub fn input(g: &mut Graph, f: &Frame) -> FrameInput {
    FrameInput {
        queries: g.constant(f.queries.clone()),
        keypoints: g.constant(f.keypoints.clone()),
        memory: Memory { tokens: g.constant(f.memory.clone()), shapes: SHAPES.to_vec() },
        scores: f.scores.clone(),
    }
}

/// A stage whose parameters are all perturbed except the zero-initialized heads.
pub fn stage_with_zero_offsets(seed: u64, cfg: &TemporalConfig) -> (ParamStore, TemporalStage) {
    let model = ModelConfig { queries: QUERIES, attention: small_attention(), ..ModelConfig::default() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stage = TemporalStage::new(&mut Init::new(&mut store, &mut rng, ""), &model, cfg);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).contains("kp_head") || store.name(id).contains("score_head") {
            continue;
        }
        let noise = Tensor::randn(store.value(id).shape(), 0.3, &mut rng);
        for (v, n) in store.value_mut(id).data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    (store, stage)
}
