use std::sync::Arc;

use crate::kernels::{attention, bilinear, conv, deform, gemm, MatRef};
use crate::{sigmoid, ConvGeometry, DeformLayout, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;
    /// Gradient of the loss with respect to each input, given ∂loss/∂output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    InverseSigmoid { x: Var, eps: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Refine { q: Var, delta: Var, eps: f64 },
    Bilinear { map: Var, points: Var },
    Deform { value: Var, offsets: Var, weights: Var, refs: Vec<[f64; 2]>, layout: Arc<DeformLayout> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Im2Col { x: Var, geom: ConvGeometry },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of executed operations.
///
/// Every op returns a new [`Var`]; `backward` walks the record in reverse.
/// Nodes whose inputs do not require gradients are recorded as values only.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Logit clamp applied inside [`Graph::refine`]; σ(±30) stays strictly inside (0, 1) in f64.
const REFINE_LOGIT_LIMIT: f64 = 30.0;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles from before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by the last `backward` call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Saved intermediates are only needed when a gradient will flow back.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::InvalidShape { op, shape: s.to_vec(), reason: "expected a matrix".into() }),
        }
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| x * c)
    }

    /// Adds the vector `b` to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let m = *self.shape(a).last().expect("non-empty shape");
        if self.value(b).numel() != m {
            return Err(TensorError::ShapeMismatch { op: "add_row", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let bias = self.data(b);
        let data = self.data(a).iter().enumerate().map(|(i, x)| x + bias[i % m]).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let data = gemm(MatRef::new(self.data(a), m, k), MatRef::new(self.data(b), k, n));
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.matrix("transpose", a)?;
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| TensorError::Config("concat_rows of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch { op: "concat_rows", lhs: self.shape(*first).to_vec(), rhs: self.shape(p).to_vec() });
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows (axis 0) by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if index.is_empty() {
            return Err(TensorError::InvalidShape { op: "gather_rows", shape, reason: "empty index".into() });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::InvalidShape { op: "gather_rows", shape, reason: format!("row {bad} out of range") });
        }
        let width = self.value(a).numel() / shape[0];
        let src = self.data(a);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = index.len();
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::GatherRows(a, index.to_vec()), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |x| gelu(x).0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn inverse_sigmoid(&mut self, a: Var, eps: f64) -> Var {
        self.map(a, Op::InverseSigmoid { x: a, eps }, |x| crate::inverse_sigmoid(x, eps))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x: a, axis }, &[a]))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let m = *shape.last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.value(p).numel() != m {
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: shape, rhs: self.shape(p).to_vec() });
            }
        }
        let (src, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let rows = src.len() / m;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for j in 0..m {
                let h = (row[j] - mean) * rs;
                xhat[r * m + j] = h;
                data[r * m + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, rstd };
        Ok(self.push(Tensor::from_parts(shape, data), op, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Row-wise dot products of two `[n×m]` matrices, giving `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("row_dot", a, b)?;
        let (n, m) = self.matrix("row_dot", a)?;
        let (x, y) = (self.data(a), self.data(b));
        let data = (0..n)
            .map(|r| x[r * m..(r + 1) * m].iter().zip(&y[r * m..(r + 1) * m]).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::RowDot(a, b), &[a, b]))
    }

    /// Scales each row to unit Euclidean norm; a zero row is an error.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, m) = self.matrix("l2_normalize_rows", a)?;
        let src = self.data(a);
        let mut norms = Vec::with_capacity(n);
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(TensorError::ZeroNorm { row: r });
            }
            for j in 0..m {
                data[r * m + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::L2NormalizeRows { x: a, norms }, &[a]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch { op: "bce_with_logits", lhs: self.shape(logits).to_vec(), rhs: vec![targets.len()] });
        }
        let loss = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n as f64;
        let op = Op::BceWithLogits { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Coarse-to-fine coordinate update `σ(σ⁻¹(q) + δ)`.
    ///
    /// Entries with `δ == 0` return `q` unchanged, so a zero offset is an exact
    /// fixed point. The summed logit is clamped to ±30, which keeps every output
    /// strictly inside (0, 1).
    pub fn refine(&mut self, q: Var, delta: Var, eps: f64) -> Result<Var, TensorError> {
        self.same_shape("refine", q, delta)?;
        let data = self
            .data(q)
            .iter()
            .zip(self.data(delta))
            .map(|(&qv, &d)| refine_value(qv, d, eps))
            .collect();
        let value = Tensor::from_parts(self.shape(q).to_vec(), data);
        Ok(self.push(value, Op::Refine { q, delta, eps }, &[q, delta]))
    }

    /// Bilinear sampling of `map` `[H×W×C]` at pixel points `[P×2]` (x, y).
    pub fn bilinear_sample(&mut self, map: Var, points: Var) -> Result<Var, TensorError> {
        let (h, w, c) = match self.shape(map) {
            &[h, w, c] => (h, w, c),
            s => return Err(TensorError::InvalidShape { op: "bilinear_sample", shape: s.to_vec(), reason: "map must be H×W×C".into() }),
        };
        let (p, two) = self.matrix("bilinear_sample", points)?;
        if two != 2 {
            return Err(TensorError::InvalidShape { op: "bilinear_sample", shape: vec![p, two], reason: "points must be P×2".into() });
        }
        let data = bilinear::forward(self.data(map), h, w, c, self.data(points));
        Ok(self.push(Tensor::from_parts(vec![p, c], data), Op::Bilinear { map, points }, &[map, points]))
    }

    /// Weighted deformable sampling core.
    ///
    /// `value` is `[tokens×d]` (all maps of `layout` stacked), `offsets`
    /// `[Nq×heads·S·2]` in pixel units of each sample's map, `weights`
    /// `[Nq×heads·S]`. `refs` are normalized reference points and carry no
    /// gradient.
    pub fn deform_sample(
        &mut self,
        value: Var,
        refs: &[[f64; 2]],
        offsets: Var,
        weights: Var,
        layout: Arc<DeformLayout>,
    ) -> Result<Var, TensorError> {
        let (tokens, dim) = self.matrix("deform_sample", value)?;
        let nq = refs.len();
        let s = layout.samples();
        let h = layout.heads;
        if h == 0 || dim % h != 0 || tokens < layout.tokens() {
            return Err(TensorError::InvalidShape { op: "deform_sample", shape: vec![tokens, dim], reason: format!("incompatible with {h} heads over {} tokens", layout.tokens()) });
        }
        if self.shape(offsets) != [nq, h * s * 2] {
            return Err(TensorError::ShapeMismatch { op: "deform_sample", lhs: vec![nq, h * s * 2], rhs: self.shape(offsets).to_vec() });
        }
        if self.shape(weights) != [nq, h * s] {
            return Err(TensorError::ShapeMismatch { op: "deform_sample", lhs: vec![nq, h * s], rhs: self.shape(weights).to_vec() });
        }
        let args = deform::DeformArgs {
            layout: &layout,
            value: self.data(value),
            dim,
            refs,
            offsets: self.data(offsets),
            weights: self.data(weights),
        };
        let data = deform::forward(&args);
        let op = Op::Deform { value, offsets, weights, refs: refs.to_vec(), layout };
        Ok(self.push(Tensor::from_parts(vec![nq, dim], data), op, &[value, offsets, weights]))
    }

    /// Multi-head scaled dot-product attention on projected inputs.
    ///
    /// `mask` is row-major `[Nq×Nk]`, `true` = attendable. With
    /// `zero_empty_rows` a fully masked query row yields zeros instead of an error.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
        zero_empty_rows: bool,
    ) -> Result<Var, TensorError> {
        let (nq, dim) = self.matrix("attention", q)?;
        let (nk, dk) = self.matrix("attention", k)?;
        self.same_shape("attention", k, v)?;
        if dk != dim {
            return Err(TensorError::ShapeMismatch { op: "attention", lhs: vec![nq, dim], rhs: vec![nk, dk] });
        }
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Config(format!("width {dim} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.len() != nq * nk {
                return Err(TensorError::ShapeMismatch { op: "attention mask", lhs: vec![nq, nk], rhs: vec![m.len()] });
            }
        }
        let shape = attention::AttnShape { nq, nk, dim, heads };
        let (data, probs) = attention::forward(&shape, self.data(q), self.data(k), self.data(v), mask, zero_empty_rows)?;
        let op = Op::Attention { q, k, v, heads, probs };
        Ok(self.push(Tensor::from_parts(vec![nq, dim], data), op, &[q, k, v]))
    }

    /// Extracts convolution patches from an `[H×W×C]` input into `[Ho·Wo × k·k·C]`.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (height, width, channels) = match self.shape(x) {
            &[h, w, c] => (h, w, c),
            s => return Err(TensorError::InvalidShape { op: "im2col", shape: s.to_vec(), reason: "expected H×W×C".into() }),
        };
        let geom = ConvGeometry { height, width, channels, kernel, stride, padding };
        let (ho, wo) = geom.output_hw()?;
        let data = conv::im2col(&geom, self.data(x));
        let value = Tensor::from_parts(vec![ho * wo, geom.patch_len()], data);
        Ok(self.push(value, Op::Im2Col { x, geom }, &[x]))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Result<Var, TensorError> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(out, Op::Custom { inputs: inputs.to_vec(), op }, inputs))
    }

    /// Replays the record backwards from the scalar `loss`.
    ///
    /// Afterwards every leaf created with `requires_grad` holds its gradient
    /// (zeros when the loss does not depend on it). Gradients from earlier
    /// calls are replaced, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut leaf_grads = Vec::new();
        let nodes = &self.nodes;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Accumulator { nodes, grads: &mut grads };
            backward_node(nodes, i, g, &mut acc, &mut leaf_grads);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                node.grad = None;
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].grad = Some(g);
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot => *slot = Some(g),
        }
    }

    /// Computes the gradient lazily, only for inputs that need it.
    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Vec<f64>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let d_inner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner;
    (value, deriv)
}

fn refine_logit(q: f64, d: f64, eps: f64) -> f64 {
    (crate::inverse_sigmoid(q, eps) + d).clamp(-REFINE_LOGIT_LIMIT, REFINE_LOGIT_LIMIT)
}

fn refine_value(q: f64, d: f64, eps: f64) -> f64 {
    if d == 0.0 {
        q
    } else {
        sigmoid(refine_logit(q, d, eps))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn backward_node(nodes: &[Node], i: usize, g: Vec<f64>, acc: &mut Accumulator, leaf_grads: &mut Vec<(usize, Vec<f64>)>) {
    let val = |v: Var| nodes[v.0].value.data();
    let shape = |v: Var| nodes[v.0].value.shape();
    let out = nodes[i].value.data();
    match &nodes[i].op {
        Op::Leaf => leaf_grads.push((i, g)),
        Op::Add(a, b) => {
            acc.add_with(*b, || g.clone());
            acc.add(*a, g);
        }
        Op::Sub(a, b) => {
            acc.add_with(*b, || g.iter().map(|x| -x).collect());
            acc.add(*a, g);
        }
        Op::Mul(a, b) => {
            acc.add_with(*a, || g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
            acc.add_with(*b, || g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
        }
        Op::Scale(a, c) => acc.add_with(*a, || g.iter().map(|x| x * c).collect()),
        Op::AddRow(a, b) => {
            acc.add_with(*b, || {
                let m = val(*b).len();
                let mut gb = vec![0.0; m];
                for (j, x) in g.iter().enumerate() {
                    gb[j % m] += x;
                }
                gb
            });
            acc.add(*a, g);
        }
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            acc.add_with(*a, || gemm(MatRef::new(&g, m, n), MatRef::new(val(*b), k, n).t()));
            acc.add_with(*b, || gemm(MatRef::new(val(*a), m, k).t(), MatRef::new(&g, m, n)));
        }
        Op::Transpose(a) => acc.add_with(*a, || {
            let (r, c) = (shape(*a)[0], shape(*a)[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            ga
        }),
        Op::Reshape(a) => acc.add(*a, g),
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).len();
                acc.add_with(*p, || g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::GatherRows(a, index) => acc.add_with(*a, || {
            let width = val(*a).len() / shape(*a)[0];
            let mut ga = vec![0.0; val(*a).len()];
            for (r, &src) in index.iter().enumerate() {
                for c in 0..width {
                    ga[src * width + c] += g[r * width + c];
                }
            }
            ga
        }),
        Op::Abs(a) => acc.add_with(*a, || {
            g.iter().zip(val(*a)).map(|(x, v)| if *v > 0.0 { *x } else if *v < 0.0 { -x } else { 0.0 }).collect()
        }),
        Op::Relu(a) => acc.add_with(*a, || g.iter().zip(val(*a)).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect()),
        Op::Gelu(a) => acc.add_with(*a, || g.iter().zip(val(*a)).map(|(x, v)| x * gelu(*v).1).collect()),
        Op::Sigmoid(a) => acc.add_with(*a, || g.iter().zip(out).map(|(x, y)| x * y * (1.0 - y)).collect()),
        Op::InverseSigmoid { x, eps } => acc.add_with(*x, || {
            g.iter()
                .zip(val(*x))
                .map(|(gv, v)| if *v > *eps && *v < 1.0 - eps { gv / (v * (1.0 - v)) } else { 0.0 })
                .collect()
        }),
        Op::Softmax { x, axis } => acc.add_with(*x, || {
            let (outer, len, inner) = split_axis(shape(*x), *axis);
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for ii in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + ii;
                    let dot: f64 = (0..len).map(|j| g[at(j)] * out[at(j)]).sum();
                    for j in 0..len {
                        gx[at(j)] = out[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            gx
        }),
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let m = val(*gamma).len();
            let rows = g.len() / m;
            acc.add_with(*gamma, || {
                let mut gg = vec![0.0; m];
                for r in 0..rows {
                    for j in 0..m {
                        gg[j] += g[r * m + j] * xhat[r * m + j];
                    }
                }
                gg
            });
            acc.add_with(*beta, || {
                let mut gb = vec![0.0; m];
                for r in 0..rows {
                    for j in 0..m {
                        gb[j] += g[r * m + j];
                    }
                }
                gb
            });
            acc.add_with(*x, || {
                let gam = val(*gamma);
                let mut gx = vec![0.0; g.len()];
                for r in 0..rows {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..m {
                        let gh = g[r * m + j] * gam[j];
                        s1 += gh;
                        s2 += gh * xhat[r * m + j];
                    }
                    for j in 0..m {
                        let gh = g[r * m + j] * gam[j];
                        gx[r * m + j] = rstd[r] / m as f64 * (m as f64 * gh - s1 - xhat[r * m + j] * s2);
                    }
                }
                gx
            });
        }
        Op::Sum(a) => acc.add_with(*a, || vec![g[0]; val(*a).len()]),
        Op::Mean(a) => acc.add_with(*a, || {
            let n = val(*a).len();
            vec![g[0] / n as f64; n]
        }),
        Op::RowDot(a, b) => {
            let m = shape(*a)[1];
            let rowwise = |other: &[f64]| -> Vec<f64> { other.iter().enumerate().map(|(j, o)| g[j / m] * o).collect() };
            acc.add_with(*a, || rowwise(val(*b)));
            acc.add_with(*b, || rowwise(val(*a)));
        }
        Op::L2NormalizeRows { x, norms } => acc.add_with(*x, || {
            let m = shape(*x)[1];
            let mut gx = vec![0.0; g.len()];
            for (r, norm) in norms.iter().enumerate() {
                let y = &out[r * m..(r + 1) * m];
                let gr = &g[r * m..(r + 1) * m];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..m {
                    gx[r * m + j] = (gr[j] - y[j] * dot) / norm;
                }
            }
            gx
        }),
        Op::BceWithLogits { logits, targets } => acc.add_with(*logits, || {
            let n = targets.len() as f64;
            val(*logits).iter().zip(targets).map(|(z, t)| g[0] * (sigmoid(*z) - t) / n).collect()
        }),
        Op::Refine { q, delta, eps } => {
            let (qs, ds) = (val(*q), val(*delta));
            let slope = |j: usize| -> f64 {
                let z = crate::inverse_sigmoid(qs[j], *eps) + ds[j];
                if z.abs() >= REFINE_LOGIT_LIMIT {
                    0.0
                } else {
                    let s = sigmoid(z);
                    s * (1.0 - s)
                }
            };
            acc.add_with(*delta, || (0..g.len()).map(|j| g[j] * slope(j)).collect());
            acc.add_with(*q, || {
                (0..g.len())
                    .map(|j| {
                        let v = qs[j];
                        if v > *eps && v < 1.0 - eps {
                            g[j] * slope(j) / (v * (1.0 - v))
                        } else {
                            0.0
                        }
                    })
                    .collect()
            });
        }
        Op::Bilinear { map, points } => {
            let &[h, w, c] = shape(*map) else { unreachable!("validated in forward") };
            let (gm, gp) = bilinear::backward(val(*map), h, w, c, val(*points), &g);
            acc.add(*map, gm);
            acc.add(*points, gp);
        }
        Op::Deform { value, offsets, weights, refs, layout } => {
            let args = deform::DeformArgs {
                layout,
                value: val(*value),
                dim: shape(*value)[1],
                refs,
                offsets: val(*offsets),
                weights: val(*weights),
            };
            let grads = deform::backward(&args, &g);
            acc.add(*value, grads.value);
            acc.add(*offsets, grads.offsets);
            acc.add(*weights, grads.weights);
        }
        Op::Attention { q, k, v, heads, probs } => {
            let s = attention::AttnShape { nq: shape(*q)[0], nk: shape(*k)[0], dim: shape(*q)[1], heads: *heads };
            let (gq, gk, gv) = attention::backward(&s, val(*q), val(*k), val(*v), probs, &g);
            acc.add(*q, gq);
            acc.add(*k, gk);
            acc.add(*v, gv);
        }
        Op::Im2Col { x, geom } => acc.add_with(*x, || conv::col2im(geom, &g)),
        Op::Custom { inputs, op } => {
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let grads = op.backward(&values, &nodes[i].value, &g);
            for (v, gi) in inputs.iter().zip(grads) {
                acc.add(*v, gi);
            }
        }
    }
}
