use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{Graph, Gradients, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance `1 / fan_in`, fan-in taken from all but the
    /// leading axis.
    FanIn,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

/// Conv weight + bias specs for `prefix.w` / `prefix.b`.
pub(crate) fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.w"), &[cout, cin, k, k], Init::FanIn),
        ParamSpec::new(format!("{prefix}.b"), &[cout], Init::Zeros),
    ]
}

pub(crate) fn gn_specs(prefix: &str, c: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gamma"), &[c], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[c], Init::Zeros),
    ]
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    /// Each tensor draws from its own stream seeded by `(seed, name)`, so
    /// initial values do not depend on which other parameters exist.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut params = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::FanIn => {
                    let fan_in: usize = spec.shape[1..].iter().product::<usize>().max(1);
                    let bound = (3.0 / fan_in as f64).sqrt();
                    let mut rng = derive_rng(seed, &spec.name);
                    (0..n)
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect()
                }
            };
            params.insert(
                spec.name.clone(),
                Tensor::from_vec(&spec.shape, data).expect("spec shape"),
            );
        }
        Self { params }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// A graph plus lazily bound parameters.
pub struct Ctx<'a, T: Real> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Real> Ctx<'a, T> {
    /// `trainable = false` binds parameters as constants (inference).
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.g.param(t)
        } else {
            self.g.input(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }

    /// Gradients of every bound parameter, by name.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
            .collect()
    }

    pub fn conv(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let k = self.g.shape(w)[2];
        self.g.conv2d(x, w, Some(b), stride, k / 2)
    }

    pub fn group_norm(&mut self, prefix: &str, x: Var, groups: usize) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.group_norm(x, gamma, beta, groups)
    }
}
