//! Named parameter storage shared by both networks, the optimizer and the
//! checkpoint format.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered map from hierarchical name (`trunk_ir.conv1.kernel`) to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn get_shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.tensors
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    /// Mutable access; clones the tensor first if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
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

    pub fn element_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    /// FNV-1a digest over names, shapes and exact bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            eat(&buf);
        }
        h
    }

    /// Element-type conversion of every tensor.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Registers every tensor on the graph, as gradient leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound<T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        g.param(v.clone())
                    } else {
                        Var::constant_shared(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Graph handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound<T> {
    vars: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> Bound<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    /// Gradients keyed by parameter name; parameters the loss does not
    /// reach get zeros.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Zero-mean normal tensor.
pub(crate) fn normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}

/// Zero-mean normal truncated at two standard deviations (resampled).
pub(crate) fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}
