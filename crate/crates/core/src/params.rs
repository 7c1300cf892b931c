//! Named parameter storage shared by every network component.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Learnable per-channel L2 normalization scale.
    Scale,
}

impl ParamKind {
    fn from_name(name: &str) -> Self {
        if name.ends_with(".bias") {
            ParamKind::Bias
        } else if name.ends_with(".scale") {
            ParamKind::Scale
        } else {
            ParamKind::Weight
        }
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(3 / fan_in)` (Caffe's "xavier" filler).
    Xavier,
    Gaussian(f64),
    Constant(f64),
}

impl Init {
    pub fn sample<R: Rng + ?Sized>(self, dims: &[usize], rng: &mut R) -> Tensor<f32> {
        match self {
            Init::Xavier => {
                let fan_in: usize = dims[1..].iter().product();
                let limit = (3.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                Tensor::from_fn(dims, |_| dist.sample(rng) as f32)
            }
            Init::Gaussian(sigma) => {
                let dist = Normal::new(0.0, sigma).expect("positive sigma");
                Tensor::from_fn(dims, |_| dist.sample(rng) as f32)
            }
            Init::Constant(v) => Tensor::full(dims, v as f32),
        }
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        ParamKind::from_name(&self.names[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Puts every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> BoundParams<'_, T> {
        let vars = self.tensors.iter().map(|t| graph.param(t.clone())).collect();
        BoundParams { set: self, vars }
    }

    /// Same layout with every element zero.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for a [`ParamSet`].
pub struct BoundParams<'a, T: Real> {
    set: &'a ParamSet<T>,
    vars: Vec<Var>,
}

impl<'a, T: Real> BoundParams<'a, T> {
    /// Names existing graph leaves after `set`, one per tensor in order.
    pub fn from_vars(set: &'a ParamSet<T>, vars: &[Var]) -> Result<Self> {
        if vars.len() != set.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                set.len()
            )));
        }
        Ok(Self {
            set,
            vars: vars.to_vec(),
        })
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.set
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::MissingTensors(vec![name.to_string()]))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
