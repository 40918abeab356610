//! Named parameter storage and per-forward binding onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::quant::QuantScheme;
use crate::tensor::{Real, Tape, Tensor, Var};

/// Optimizer group. The backbone trains at a smaller learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Rest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    groups: Vec<ParamGroup>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            groups: Vec::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.groups.push(group);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a leaf. With `fake_quant_weights`, each
    /// leaf is routed through a symmetric per-tensor quantize-dequantize.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool, fake_quant_weights: bool) -> Bound {
        let mut leaves = Vec::with_capacity(self.values.len());
        let mut vars = Vec::with_capacity(self.values.len());
        for v in &self.values {
            let leaf = tape.leaf(v.clone(), requires_grad);
            leaves.push(leaf);
            vars.push(if fake_quant_weights {
                let scheme = QuantScheme::symmetric(v.data().iter().map(|x| x.as_f64()));
                tape.fake_quant(leaf, scheme)
            } else {
                leaf
            });
        }
        Bound { vars, leaves }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            groups: self.groups.clone(),
        }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    leaves: Vec<Var>,
}

impl Bound {
    /// Uses `vars` directly as both forward values and gradient leaves, in
    /// parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self {
            leaves: vars.clone(),
            vars,
        }
    }

    /// Value to use in the forward pass.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaf that accumulates the gradient for `id`.
    pub fn leaf(&self, id: ParamId) -> Var {
        self.leaves[id.0]
    }

    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

/// Seeded parameter factory: weights uniform in `±1/√fan_in`.
pub struct ParamBuilder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a, T: Real> ParamBuilder<'a, T> {
    pub fn uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        group: ParamGroup,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let value = Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
        self.store.push(name, value, group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], group: ParamGroup) -> ParamId {
        self.store.push(name, Tensor::zeros(shape), group)
    }
}
