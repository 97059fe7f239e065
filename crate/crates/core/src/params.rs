//! Ordered, named parameter collections.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Parameters in a fixed declaration order, each with a dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<P> {
    names: Vec<String>,
    values: Vec<P>,
}

impl<P> Default for ParamSet<P> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<P> ParamSet<P> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, value: P) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[P] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [P] {
        &mut self.values
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&P> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &P)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn map<Q>(&self, f: impl FnMut(&P) -> Q) -> ParamSet<Q> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(f).collect(),
        }
    }
}

impl<P> std::ops::Index<usize> for ParamSet<P> {
    type Output = P;

    fn index(&self, i: usize) -> &P {
        &self.values[i]
    }
}

impl<T: Scalar> ParamSet<Tensor<T>> {
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> ParamSet<Var> {
        self.map(|p| tape.leaf(p.clone(), trainable))
    }

    /// Replaces the values with `values`, checking names and shapes.
    pub fn load(&mut self, other: &ParamSet<Tensor<T>>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names differ".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

impl ParamSet<Var> {
    /// Gradients of every parameter after `backward` (zeros where none flowed).
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> ParamSet<Tensor<T>> {
        self.map(|&v| tape.grad_or_zeros(v))
    }
}
