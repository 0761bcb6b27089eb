use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.names.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    /// Uniform(-bound, bound) initialised parameter.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| F::c(dist.sample(rng))).collect()
        } else {
            vec![F::zero(); n]
        };
        self.add(name, Tensor::new(shape.to_vec(), data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), F::c(value)))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, n, _)| n.starts_with(prefix)).map(|(id, _, _)| id)
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter().filter(|(_, n, _)| n.starts_with(prefix)).map(|(_, _, t)| t.numel()).sum()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Which parameters receive gradients in a [`Session`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask {
    trainable: Vec<bool>,
}

impl TrainMask {
    pub fn none<F: Scalar>(store: &ParamStore<F>) -> Self {
        Self { trainable: vec![false; store.len()] }
    }

    pub fn all<F: Scalar>(store: &ParamStore<F>) -> Self {
        Self { trainable: vec![true; store.len()] }
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn prefixes<F: Scalar>(store: &ParamStore<F>, prefixes: &[&str]) -> Self {
        let trainable = store.iter().map(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p))).collect();
        Self { trainable }
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable.get(id.0).copied().unwrap_or(false)
    }

    pub fn set(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn count(&self) -> usize {
        self.trainable.iter().filter(|&&t| t).count()
    }
}

/// A forward pass over a parameter store: binds parameters lazily as graph
/// leaves and collects their gradients after `backward`.
pub struct Session<'s, F> {
    pub graph: Graph<F>,
    store: &'s ParamStore<F>,
    mask: Option<&'s TrainMask>,
    bound: Vec<Option<Var>>,
}

impl<'s, F: Scalar> Session<'s, F> {
    /// Gradient-free session (inference mode).
    pub fn inference(store: &'s ParamStore<F>) -> Self {
        Self { graph: Graph::new(false), store, mask: None, bound: vec![None; store.len()] }
    }

    pub fn train(store: &'s ParamStore<F>, mask: &'s TrainMask) -> Self {
        Self { graph: Graph::new(true), store, mask: Some(mask), bound: vec![None; store.len()] }
    }

    pub fn store(&self) -> &ParamStore<F> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.graph.grad_enabled()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.mask.is_some_and(|m| m.is_trainable(id));
        let v = self.graph.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        self.graph.value(v)
    }

    /// Runs the reverse pass and returns gradients of trainable parameters
    /// that took part in the forward pass.
    pub fn backward(&self, loss: Var) -> Vec<(ParamId, Tensor<F>)> {
        let mut grads = self.graph.backward(loss);
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let id = ParamId(i);
                if !self.mask.is_some_and(|m| m.is_trainable(id)) {
                    return None;
                }
                grads.take(v).map(|g| (id, g))
            })
            .collect()
    }
}
