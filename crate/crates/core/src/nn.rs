//! Parameterized building blocks: affine maps, layer normalization, feed-forward blocks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vepe_tensor::params::{Ctx, ParamId, ParamStore};
use vepe_tensor::{Tensor, TensorError, Var};

/// Parameter registration scope: a name prefix plus the shared init RNG.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, rng: self.rng, prefix }
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.add(full, value)
    }

    /// Glorot-uniform `[fan_in × fan_out]` matrix.
    pub fn glorot(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::rand_uniform(&[fan_in, fan_out], -limit, limit, self.rng);
        self.add(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], limit: f64) -> ParamId {
        let t = Tensor::rand_uniform(shape, -limit, limit, self.rng);
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn random_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.glorot("w", fan_in, fan_out);
        let b = s.zeros("b", &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = init.scope(name);
        let w = s.zeros("w", &[fan_in, fan_out]);
        let b = s.zeros("b", &[fan_out]);
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let w = ctx.p(self.w);
        let b = ctx.p(self.b);
        let y = ctx.g.matmul(x, w)?;
        ctx.g.add_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, width: usize) -> Self {
        let mut s = init.scope(name);
        Self { gamma: s.ones("gamma", &[width]), beta: s.zeros("beta", &[width]) }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let g = ctx.p(self.gamma);
        let b = ctx.p(self.beta);
        ctx.g.layer_norm(x, g, b)
    }
}

/// Two affine maps with a GELU in between; the residual is the caller's.
#[derive(Clone, Copy, Debug)]
pub struct Ffn {
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new(init: &mut Init, name: &str, d: usize, width: usize) -> Self {
        let mut s = init.scope(name);
        Self { l1: Linear::new(&mut s, "l1", d, width), l2: Linear::new(&mut s, "l2", width, d) }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var, TensorError> {
        let h = self.l1.forward(ctx, x)?;
        let h = ctx.g.gelu(h);
        self.l2.forward(ctx, h)
    }
}

/// Residual sub-layer followed by post-normalization: `LN(x + f)`.
pub fn add_norm(ctx: &mut Ctx, norm: &LayerNorm, x: Var, f: Var) -> Result<Var, TensorError> {
    let s = ctx.g.add(x, f)?;
    norm.forward(ctx, s)
}

/// Fixed sinusoidal encoding of normalized 2-D positions into `d` channels.
///
/// The first half of the channels encodes x, the second half y, each as
/// interleaved sin/cos pairs over geometric frequencies.
pub fn sine_encoding(points: &[[f64; 2]], d: usize) -> Tensor {
    let half = d / 2;
    let pairs = half / 2;
    Tensor::from_fn(&[points.len(), d], |i| {
        let (row, col) = (i / d, i % d);
        let (coord, c) = if col < half { (points[row][0], col) } else { (points[row][1], col - half) };
        let k = (c / 2).min(pairs.saturating_sub(1));
        let freq = 2.0 * std::f64::consts::PI * 2f64.powf(k as f64 * 4.0 / pairs.max(1) as f64);
        if c % 2 == 0 { (coord * freq).sin() } else { (coord * freq).cos() }
    })
}

/// Normalized cell centres of an `h×w` grid, row-major.
pub fn cell_centres(h: usize, w: usize) -> Vec<[f64; 2]> {
    (0..h * w).map(|i| [((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64]).collect()
}
