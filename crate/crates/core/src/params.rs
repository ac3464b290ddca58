//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-limit, limit]`.
    Uniform(f64),
    /// Uniform in `±1/sqrt(fan_in)` where `fan_in` is the first extent.
    FanIn,
}

/// Ordered collection of named tensors. Registration order is stable and
/// defines checkpoint record order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::contract(format!("parameter `{name}` registered twice")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); numel],
            Init::Ones => vec![T::one(); numel],
            Init::Uniform(limit) => (0..numel)
                .map(|_| T::of_f64(rng.gen_range(-limit..=limit)))
                .collect(),
            Init::FanIn => {
                let limit = 1.0 / (shape[0] as f64).sqrt();
                (0..numel)
                    .map(|_| T::of_f64(rng.gen_range(-limit..=limit)))
                    .collect()
            }
        };
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn total_numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
