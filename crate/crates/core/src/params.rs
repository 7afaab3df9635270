//! Named tensor storage shared by every model component.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Array2<T>,
    pub trainable: bool,
}

/// Ordered map from parameter name to tensor. Insertion order is the
/// serialization order of checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array2<T>> {
        self.get(name).map(|p| &p.value)
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn num_elements(&self, trainable_only: bool) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable || !trainable_only)
            .map(|p| p.value.len())
            .sum()
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let entries = self
            .entries
            .iter()
            .map(|(n, p)| {
                let value = p.value.mapv(|v| U::from_f64(v.to_f64().unwrap()).unwrap());
                (
                    n.clone(),
                    Param {
                        value,
                        trainable: p.trainable,
                    },
                )
            })
            .collect();
        ParamStore { entries }
    }

    /// Extends with every entry of `other`, replacing existing names.
    pub fn merge(&mut self, other: ParamStore<T>) {
        self.entries.extend(other.entries);
    }
}

/// Forward-pass context: a fresh tape plus read access to parameters.
pub struct Ctx<'a, T: Scalar> {
    pub tape: Tape<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(params: &'a ParamStore<T>) -> Self {
        Ctx {
            tape: Tape::new(),
            params,
        }
    }

    /// Binds a parameter onto the tape. Missing names are programming
    /// errors in model wiring, so this panics with the name.
    pub fn p(&mut self, name: &str) -> Var {
        let param = self
            .params
            .get(name)
            .unwrap_or_else(|_| panic!("parameter `{name}` not initialized"));
        self.tape.param(name, &param.value, param.trainable)
    }
}

pub(crate) fn normal_matrix<T: Scalar, R: Rng>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    std: f64,
) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_fn((rows, cols), |_| T::lit(dist.sample(rng)))
}
