//! Dense tensors and name-keyed tensor collections.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Shapes are nonempty lists of positive dimensions;
/// a tensor always holds at least one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::ShapeMismatch("empty shape".into()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// One-dimensional tensor over the given values.
    pub fn vector(data: Vec<T>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![T::zero(); numel])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Same shape, new values.
    pub fn with_data(&self, data: Vec<T>) -> Result<Self> {
        Tensor::new(self.shape.clone(), data)
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Named tensors, kept in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TensorMap<T> {
    pub fn new() -> Self {
        TensorMap {
            entries: BTreeMap::new(),
        }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, Tensor<T>)>) -> Self {
        TensorMap {
            entries: entries.into_iter().collect(),
        }
    }

    /// Inserts a tensor, replacing any previous tensor of the same name.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.entries.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Checks that `other` holds exactly the same names with the same shapes.
    pub fn same_layout(&self, other: &TensorMap<T>, what: &str) -> Result<()> {
        let mut a = self.entries.iter();
        let mut b = other.entries.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) => {
                    return Err(Error::ManifestMismatch(format!(
                        "tensor {name} missing from {what}"
                    )));
                }
                (None, Some((name, _))) => {
                    return Err(Error::ManifestMismatch(format!(
                        "unexpected tensor {name} in {what}"
                    )));
                }
                (Some((na, ta)), Some((nb, tb))) => {
                    if na != nb {
                        let missing = if na < nb { na } else { nb };
                        return Err(Error::ManifestMismatch(format!(
                            "tensor {missing} present in only one of the inputs ({what})"
                        )));
                    }
                    if ta.shape() != tb.shape() {
                        return Err(Error::ManifestMismatch(format!(
                            "tensor {na}: shape {:?} vs {:?} ({what})",
                            ta.shape(),
                            tb.shape()
                        )));
                    }
                }
            }
        }
    }
}

impl<T: Scalar> IntoIterator for TensorMap<T> {
    type Item = (String, Tensor<T>);
    type IntoIter = std::collections::btree_map::IntoIter<String, Tensor<T>>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.into_iter()
    }
}
