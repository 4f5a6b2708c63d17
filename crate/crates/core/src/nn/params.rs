use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: String, t: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Zero every parameter whose name matches `pred`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut n = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
                n += 1;
            }
        }
        n
    }

    /// Replace all values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Validation {
                what: "parameter names".into(),
                expected: format!("{} parameters", self.names.len()),
                actual: format!("{} parameters", other.names.len()),
            });
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::Validation {
                    what: format!("shape of {}", self.names[i]),
                    expected: format!("{:?}", a.shape()),
                    actual: format!("{:?}", b.shape()),
                });
            }
        }
        self.tensors = other.tensors.clone();
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Seeded parameter initializer with hierarchical names.
pub struct Init<'s, T> {
    store: &'s mut ParamStore<T>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'s, T: Scalar> Init<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    /// Run `f` with `name` appended to the parameter prefix.
    pub fn scope<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.into());
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn tensor(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::rand_uniform(shape, -bound, bound, &mut self.rng);
        self.tensor(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.tensor(name, Tensor::ones(shape))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Ctx<'p, T> {
    pub g: Graph<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
    record: bool,
    hooks: Vec<(String, Var)>,
    attention: Vec<Var>,
}

impl<'p, T: Scalar> Ctx<'p, T> {
    /// `train` controls whether parameters receive gradients.
    pub fn new(params: &'p ParamStore<T>, train: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            train,
            record: false,
            hooks: Vec::new(),
            attention: Vec::new(),
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    /// Keep named activations and attention weights for inspection.
    pub fn with_recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.get(id).clone(), self.train);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.g.input(t)
    }

    pub fn hook(&mut self, name: &str, v: Var) {
        if self.record {
            self.hooks.push((name.to_string(), v));
        }
    }

    pub fn hooked(&self, name: &str) -> Option<Var> {
        self.hooks.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    pub fn hook_names(&self) -> Vec<String> {
        self.hooks.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn record_attention(&mut self, w: Var) {
        if self.record {
            self.attention.push(w);
        }
    }

    pub fn attention_weights(&self) -> &[Var] {
        &self.attention
    }

    /// Parameter gradients aligned with store order; `None` for parameters
    /// that did not take part in the pass.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}
