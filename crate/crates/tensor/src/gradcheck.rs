//! Central finite-difference verification of recorded gradients.
//!
//! The checked function may return any shape; it is reduced to a scalar by a
//! fixed random projection so every output entry contributes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Graph, Tensor, TensorError, Var};

/// Per-input outcome.
#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub tol: f64,
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }

    fn worst(&self) -> Option<&InputReport> {
        self.inputs.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<28} max_rel_err={:.3e} tol={:.0e}", self.name, self.max_rel_err(), self.tol)?;
        if let Some(w) = self.worst() {
            write!(
                f,
                " worst=input{}[{}] analytic={:.6e} numeric={:.6e}",
                w.input, w.worst_index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

/// Finite-difference checker configuration.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub tol: f64,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// Checks at most this many random entries per input when set.
    pub sample: Option<usize>,
    pub seed: u64,
}

impl GradCheck {
    pub fn new(name: impl Into<String>, tol: f64) -> Self {
        Self { name: name.into(), tol, step: 1e-5, floor: 1e-3, sample: None, seed: 0x6772_6164 }
    }

    pub fn sample(mut self, n: usize) -> Self {
        self.sample = Some(n);
        self
    }

    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradReport, TensorError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        self.ensure_finite(g.value(out))?;
        let projection: Vec<f64> = (0..g.value(out).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = project(&mut g, out, &projection)?;
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).expect("leaf gradient").to_vec()).collect();

        let eval = |values: &[Tensor]| -> Result<f64, TensorError> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            self.ensure_finite(g.value(out))?;
            Ok(g.value(out).data().iter().zip(&projection).map(|(a, b)| a * b).sum())
        };

        let mut reports = Vec::with_capacity(inputs.len());
        let mut work = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let indices: Vec<usize> = match self.sample {
                Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
                _ => (0..n).collect(),
            };
            let mut report = InputReport { input: i, max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0, checked: indices.len() };
            for &j in &indices {
                let orig = input.data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i][j];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(self.floor);
                if err > report.max_rel_err || !err.is_finite() {
                    report = InputReport { max_rel_err: if err.is_finite() { err } else { f64::INFINITY }, worst_index: j, analytic: a, numeric, ..report };
                }
            }
            reports.push(report);
        }
        Ok(GradReport { name: self.name.clone(), tol: self.tol, inputs: reports })
    }

    fn ensure_finite(&self, t: &Tensor) -> Result<(), TensorError> {
        match t.data().iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { op: self.name.clone(), index }),
            None => Ok(()),
        }
    }
}

fn project(g: &mut Graph, out: Var, projection: &[f64]) -> Result<Var, TensorError> {
    let p = g.constant(Tensor::new(g.shape(out), projection.to_vec())?);
    let prod = g.mul(out, p)?;
    Ok(g.sum(prod))
}

/// Shorthand for [`GradCheck::new`]`(name, tol).run(f, inputs)`.
pub fn gradcheck<F>(name: &str, f: F, inputs: &[Tensor], tol: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    GradCheck::new(name, tol).run(f, inputs)
}
