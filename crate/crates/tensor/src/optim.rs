//! Adam with decoupled weight decay.

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescales the joint gradient to at most this global L2 norm when set.
    pub clip_norm: Option<f64>,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, clip_norm: None, step: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|(_, g)| g).map(|x| x * x).sum::<f64>().sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, grad) in grads {
            let value = store.value_mut(*id).data_mut();
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()]));
            for i in 0..value.len() {
                let g = grad[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                value[i] -= self.lr * (update + self.weight_decay * value[i]);
            }
        }
    }
}
