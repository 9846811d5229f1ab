use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A named tensor plus whether the optimizer may touch it. Non-trainable
/// entries hold running statistics and other buffers that travel with a
/// checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered table of named tensors. Models read their weights from here by
/// name; the element type decides the precision of a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateTensor(name));
        }
        self.entries.insert(name, ParamEntry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.entries.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry { value: e.value.cast(), trainable: e.trainable },
                    )
                })
                .collect(),
        }
    }

    /// Copies every entry of `other` into `self`, keeping prefixes distinct.
    pub fn merge(&mut self, other: Params<T>) -> Result<()> {
        for (k, e) in other.entries {
            self.insert(k, e.value, e.trainable)?;
        }
        Ok(())
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Params<T> {
        Params {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }
}

/// Seeded weight initializers used by every model constructor.
pub struct Init<'a, R: Rng> {
    pub rng: &'a mut R,
}

impl<'a, R: Rng> Init<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng }
    }

    /// Kaiming-uniform style fan-in init for a `fan_in × fan_out` weight.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt() as f32;
        self.uniform(fan_in, fan_out, bound)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f32) -> Tensor<f32> {
        if bound == 0.0 {
            return Tensor::zeros(rows, cols);
        }
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(self.rng)).collect())
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f32) -> Tensor<f32> {
        let dist = Normal::new(0.0f32, std).unwrap();
        Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(self.rng)).collect())
    }
}
