//! Named parameter tensors and their per-step binding onto a tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Parameters keyed by canonical dotted name; iteration is in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Scalar> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::usage(format!("no parameter named '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Zeros with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Records every parameter on `tape`, as tracked leaves when `tracked`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, tracked: bool) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| {
                    let var = if tracked { tape.param(v.clone()) } else { tape.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        }
    }
}

/// Parameters recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Pairs `names` with already-recorded vars, in order.
    pub fn from_vars<'n>(names: impl IntoIterator<Item = &'n str>, vars: &[Var<'t, T>]) -> Self {
        Bound {
            vars: names.into_iter().map(String::from).zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::usage(format!("no parameter named '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients of every bound parameter, zeros where unreached.
    pub fn gradients(&self, grads: &Gradients<T>) -> ParamSet<T> {
        ParamSet {
            tensors: self
                .vars
                .iter()
                .map(|(k, &v)| (k.clone(), grads.wrt_or_zeros(v)))
                .collect(),
        }
    }
}
