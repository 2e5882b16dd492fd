//! Trainable parameters and the stores that own them.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter; graphs and optimizer state are
/// keyed by it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ParamKey(u64);

impl ParamKey {
    fn fresh() -> Self {
        ParamKey(NEXT_KEY.fetch_add(1, Ordering::Relaxed))
    }
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    key: ParamKey,
    name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            key: ParamKey::fresh(),
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn key(&self) -> ParamKey {
        self.key
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Adds the gradients recorded for this store's parameters. Parameters the
    /// graph never touched keep a zero contribution.
    pub fn accumulate(&mut self, grads: &Gradients<S>) {
        for p in &mut self.params {
            if let Some(g) = grads.param(p.key) {
                p.grad.add_assign(g);
            }
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let total: f64 = self
            .params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt();
        if total > max_norm && total > 0.0 {
            let s = S::of(max_norm / (total + 1e-6));
            self.params.iter_mut().for_each(|p| p.grad.scale(s));
        }
        total
    }

    /// Hash over the bit patterns of all values, for detecting any change.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.value.data() {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}
