//! Named, ordered parameter collection.
//!
//! Iteration order is insertion order everywhere (gradient reduction,
//! optimizer state, checkpoints, checksums), which keeps whole-run results
//! bit-reproducible.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameters<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for Parameters<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Parameters<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name. Panics on duplicates: the
    /// parameter map is built once by model construction, never at runtime.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.requiring_grad());
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn at(&self, i: usize) -> (&str, &Tensor<F>) {
        (&self.names[i], &self.tensors[i])
    }

    pub fn at_mut(&mut self, i: usize) -> (&str, &mut Tensor<F>) {
        (&self.names[i], &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter())
    }

    /// Total number of scalar coordinates.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over every tensor's little-endian bytes, in insertion order.
    /// Used to assert freeze contracts and checkpoint integrity.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_le_bytes().as_ref() {
                    h ^= u64::from(*b);
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}
