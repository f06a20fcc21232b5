use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::TensorError;

/// Dense row-major array of `f64` values.
///
/// A `Tensor` is a plain value. Gradient bookkeeping (`requires_grad`, the
/// accumulated gradient) lives on the [`Graph`](crate::Graph) node that wraps
/// it, so tensors can be shared read-only between forward passes.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: "dimensions must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds a tensor without validating the shape; callers guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_parts(vec![n], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..numel).map(&mut f).collect())
    }

    /// Samples i.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows × columns view of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::InvalidShape {
                op: "dims2",
                shape: self.shape.clone(),
                reason: "expected a matrix".into(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            off = off * dim + ix;
        }
        off
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.6}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", …")?;
        }
        write!(f, "]")
    }
}
