//! Minimal dense-tensor numerics with recorded reverse-mode differentiation.
//!
//! Forward operations append to a [`Graph`] (the computation record); calling
//! [`Graph::backward`] on a scalar replays the record in reverse and leaves a
//! gradient on every leaf that was created with `requires_grad`.
//!
//! ```
//! use vepe_tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let a = g.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), true);
//! let b = g.constant(Tensor::new(&[2, 1], vec![3.0, 4.0]).unwrap());
//! let y = g.matmul(a, b).unwrap();
//! let loss = g.sum(y);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(a).unwrap(), &[3.0, 4.0]);
//! ```

mod error;
mod graph;
mod kernels;
mod tensor;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;

pub use error::TensorError;
pub use graph::{CustomOp, Graph, Var};
pub use kernels::bilinear::{bilinear_corners, sample_bilinear};
pub use kernels::conv::ConvGeometry;
pub use kernels::deform::{DeformLayout, LevelSpec};
pub use tensor::Tensor;

/// Default clamp for the inverse sigmoid; keeps logits within about ±11.5.
pub const INVERSE_SIGMOID_EPS: f64 = 1e-5;

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of `x` after clamping it to `[eps, 1 - eps]`.
pub fn inverse_sigmoid(x: f64, eps: f64) -> f64 {
    let c = x.clamp(eps, 1.0 - eps);
    (c / (1.0 - c)).ln()
}
