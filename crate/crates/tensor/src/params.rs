//! Named parameter storage and per-step binding into a [`Graph`].

use crate::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named parameters; insertion order is the checkpoint order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a trainable parameter.
    ///
    /// # Panics
    /// On a duplicate or whitespace-containing name; both are construction bugs.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!name.is_empty() && !name.contains(char::is_whitespace), "bad parameter name {name:?}");
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<(), TensorError> {
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch { op: "param set", lhs: slot.shape().to_vec(), rhs: value.shape().to_vec() });
        }
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Binds parameters into a graph on first use during one forward pass.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'a> Ctx<'a> {
    /// `train` makes trainable parameters gradient leaves; otherwise all are constants.
    pub fn new(g: &'a mut Graph, params: &'a ParamStore, train: bool) -> Self {
        Self { g, params, bound: vec![None; params.len()], train }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.params.value(id).clone();
        let v = self.g.leaf(value, self.train && self.params.is_trainable(id));
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses `var` in place of the stored value for `id` (gradient checks).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Gradients of trainable parameters touched in this pass, after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.params.is_trainable(ParamId(i)) {
                    return None;
                }
                self.g.grad(v).map(|g| (ParamId(i), g.to_vec()))
            })
            .collect()
    }
}
