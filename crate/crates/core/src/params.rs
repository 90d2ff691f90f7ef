//! Named parameter storage and the per-forward binding of parameters into a graph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) re-drawn until within two standard deviations.
    TruncNormal {
        std: f64,
    },
    Uniform {
        bound: f64,
    },
}

/// Declaration of one named tensor a module owns.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Running statistics and similar buffers are persisted but not optimised.
    pub trainable: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Anything that owns named parameters.
pub trait Module {
    fn param_specs(&self, out: &mut Vec<ParamSpec>);

    fn specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        self.param_specs(&mut v);
        v
    }

    /// Number of trainable scalars.
    fn num_params(&self) -> usize {
        self.specs().iter().filter(|s| s.trainable).map(ParamSpec::numel).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Name-ordered tensor collection; iteration order is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl ParamStore<f32> {
    /// Draws every spec in declaration order from a seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::default();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<f32> = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::TruncNormal { std } => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| loop {
                            let v: f64 = normal.sample(&mut rng);
                            if v.abs() <= 2.0 * std {
                                break v as f32;
                            }
                        })
                        .collect()
                }
                Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound) as f32).collect(),
            };
            let t = Tensor::new(spec.shape.clone(), data)
                .expect("spec shapes are positive")
                .with_grad(spec.trainable);
            store.tensors.insert(spec.name.clone(), t);
        }
        store
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that the store holds exactly the declared tensors with the
    /// declared shapes; the error names the first offending tensor.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
        sorted.sort_by(|a, b| a.name.cmp(&b.name));
        for spec in sorted {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::ParameterShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(Error::UnexpectedParameter(extra.to_string()));
        }
        Ok(())
    }

    /// Marks tensors trainable according to `specs` (checkpoints do not carry the flag).
    pub fn apply_trainable(&mut self, specs: &[ParamSpec]) {
        for spec in specs {
            if let Some(t) = self.tensors.remove(&spec.name) {
                self.tensors.insert(spec.name.clone(), t.with_grad(spec.trainable));
            }
        }
    }
}

/// One forward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a, T: Scalar = f32> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    training: bool,
    frozen: bool,
    updates: Vec<(String, Vec<T>)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>, training: bool) -> Self {
        Self::with_graph(Graph::new(), store, training)
    }

    pub fn with_graph(graph: Graph<T>, store: &'a ParamStore<T>, training: bool) -> Self {
        Self {
            graph,
            store,
            bound: BTreeMap::new(),
            training,
            frozen: false,
            updates: Vec::new(),
        }
    }

    /// Binds every parameter as a constant, so no gradients are tracked.
    pub fn freeze_params(&mut self) {
        self.frozen = true;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Graph handle for parameter `name`, recorded as a leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let v = if self.frozen {
            self.graph.constant(t.shape().to_vec(), t.data().to_vec())?
        } else {
            self.graph.leaf(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Raw values of a non-trainable buffer.
    pub fn buffer(&self, name: &str) -> Result<&'a [T]> {
        Ok(self.store.get(name)?.data())
    }

    /// Queues a buffer overwrite, applied by [`SessionOutput::apply_updates`].
    pub fn record_update(&mut self, name: String, values: Vec<T>) {
        self.updates.push((name, values));
    }

    pub fn finish(self) -> SessionOutput<T> {
        SessionOutput {
            graph: self.graph,
            bound: self.bound,
            updates: self.updates,
        }
    }
}

/// A completed forward pass, detached from the store so the store can be mutated.
pub struct SessionOutput<T: Scalar> {
    pub graph: Graph<T>,
    pub bound: BTreeMap<String, Var>,
    pub updates: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> SessionOutput<T> {
    /// Backward from `loss`, accumulating into the store's gradient buffers.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.graph.backward(loss)?;
        for (name, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(grads)
    }

    pub fn apply_updates(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (name, values) in &self.updates {
            let t = store.get_mut(name)?;
            if t.len() != values.len() {
                return Err(Error::ElementCount {
                    op: "buffer update",
                    from: values.len(),
                    to: t.len(),
                });
            }
            t.data_mut().copy_from_slice(values);
        }
        Ok(())
    }
}
