use std::collections::BTreeMap;
use std::rc::Rc;

use crate::{Real, Tensor};

/// Index of a parameter inside a [`ParamTree`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named hierarchy of learnable arrays with a gradient slot per array.
///
/// Names are `/`-separated paths such as `prior/layer0/coupling/w_scale`.
/// Shapes are fixed once a parameter is registered.
#[derive(Clone, Debug, Default)]
pub struct ParamTree<T: Real> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    grads: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamTree<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), grads: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a new parameter. Panics on duplicate names.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.grads.push(Tensor::zeros(value.shape().to_vec()));
        self.values.push(Rc::new(value));
        self.index.insert(name.clone(), id);
        self.names.push(name);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Number of scalars under a name prefix.
    pub fn numel_under(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub(crate) fn value_rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    /// Replaces a value; the shape must match.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Adds the parameter gradients of a backward pass into the gradient slots.
    pub fn accumulate_grads(&mut self, grads: &crate::Gradients<T>) {
        for (id, g) in grads.params() {
            self.grads[id.0].axpy(T::one(), g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.all_finite())
    }

    /// `(name, value)` pairs in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Same tree converted to another precision.
    pub fn cast<U: Real>(&self) -> ParamTree<U> {
        let mut out = ParamTree::new();
        for (name, v) in self.iter() {
            out.insert(name, v.cast());
        }
        out
    }

    /// Flattened copy of all values, in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Flattened copy of all gradients, in registration order.
    pub fn flatten_grads(&self) -> Vec<T> {
        self.grads.iter().flat_map(|v| v.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamTree::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length mismatch");
        let mut off = 0;
        for v in &mut self.values {
            let v = Rc::make_mut(v);
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}
