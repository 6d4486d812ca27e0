use std::ops::Range;

use dcml_tensor::{Element, Graph, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of parameters registered by one module, used to pick
/// which parts of a model a training phase may update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup(Range<usize>);

impl ParamGroup {
    pub fn contains(&self, id: ParamId) -> bool {
        self.0.contains(&id.0)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.0.clone().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Named parameter tensors. Model structs hold [`ParamId`]s into a store, so
/// one layout can run against several stores (query and key encoders).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Runs `build` and returns the group of parameters it registered.
    pub fn group<R>(&mut self, build: impl FnOnce(&mut Self) -> R) -> (R, ParamGroup) {
        let start = self.len();
        let out = build(self);
        (out, ParamGroup(start..self.len()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }

    /// SHA-256 over names, shapes and the f32 bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn ensure_same_layout<U: Element>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (i, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            if self.names[i] != other.names[i] || a.shape() != b.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: {} {:?} vs {} {:?}",
                    self.names[i],
                    a.shape(),
                    other.names[i],
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Replaces every value with the one of the same name in `src`.
    pub fn load_from(&mut self, src: &ParamStore<T>) -> Result<()> {
        for i in 0..self.len() {
            let j = src
                .find(&self.names[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", self.names[i])))?;
            if src.values[j.0].shape() != self.values[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    self.names[i],
                    src.values[j.0].shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = src.values[j.0].clone();
        }
        Ok(())
    }
}

/// Gradients collected from one backward pass, indexed like the store.
/// Frozen or unused parameters have `None`.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Grads<T> {
    /// Gradients for `len` parameters, given only for the listed ids.
    pub fn from_items(len: usize, items: Vec<(ParamId, Tensor<T>)>) -> Self {
        let mut slots = vec![None; len];
        for (id, g) in items {
            slots[id.0] = Some(g);
        }
        Grads { slots }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

/// One forward/backward pass over a store. Parameters are bound into the
/// graph lazily on first use: trainable ones as differentiable leaves, the
/// rest as constants.
pub struct Session<'a, T: Element> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    trainable: Vec<bool>,
}

impl<'a, T: Element> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: impl Fn(ParamId) -> bool) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            trainable: store.ids().map(trainable).collect(),
        }
    }

    /// Every parameter trainable.
    pub fn train(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| true)
    }

    /// Inference only: nothing is differentiable.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let value = self.store.get(id).clone();
        let v = if self.trainable[id.0] {
            self.graph.param(value)?
        } else {
            self.graph.constant(value)?
        };
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        Ok(self.graph.constant(value)?)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Backpropagates from `root` and collects gradients of the trainable
    /// parameters that were bound.
    pub fn backward(&mut self, root: Var) -> Result<Grads<T>> {
        self.graph.backward(root)?;
        let slots = self
            .bound
            .iter()
            .zip(&self.trainable)
            .map(|(b, &t)| match b {
                Some(v) if t => self.graph.grad(*v),
                _ => None,
            })
            .collect();
        Ok(Grads { slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dcml_tensor::Axis;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::ones(&[2]));
        let b = store.add("b", Tensor::ones(&[2]));
        let mut s = Session::new(&store, |id| id == a);
        let va = s.param(a).unwrap();
        let vb = s.param(b).unwrap();
        let y = s.graph.mul(va, vb).unwrap();
        let y = s.graph.sum(y, Axis::All).unwrap();
        let grads = s.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn binding_is_cached() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::ones(&[3]));
        let mut s = Session::train(&store);
        assert_eq!(s.param(a).unwrap(), s.param(a).unwrap());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::ones(&[3]));
        let before = store.checksum();
        assert_eq!(before, store.clone().checksum());
        store.get_mut(a).data_mut()[0] = 2.0;
        assert_ne!(before, store.checksum());
        assert_eq!(before.len(), 64);
    }

    #[test]
    fn groups_cover_registered_ranges() {
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::ones(&[1]));
        let ((), g) = store.group(|s| {
            s.add("y", Tensor::ones(&[1]));
            s.add("z", Tensor::ones(&[1]));
        });
        let ids: Vec<_> = g.ids().map(|i| i.index()).collect();
        assert_eq!(ids, vec![1, 2]);
        assert!(!g.contains(ParamId(0)));
    }
}
