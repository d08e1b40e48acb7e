use std::collections::HashMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};
use crate::rng;

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        self.index.insert(name.to_string(), id);
        id
    }

    /// `uniform(-1/√fan_in, 1/√fan_in)` from a stream keyed by the parameter
    /// name, so a parameter's initial value does not depend on which other
    /// parameters exist.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut r = rng::stream(seed, &format!("init/{name}"), 0);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let v: f32 = r.random_range(-bound as f32..bound as f32);
                T::from_f64_lossy(f64::from(v))
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("finite init");
        self.insert(name, t)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) -> usize {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|i| &self.tensors[i])
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: &[T]) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let t = &mut self.tensors[id];
        if t.len() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "set parameter",
                left: t.shape().to_vec(),
                right: vec![data.len()],
            });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
