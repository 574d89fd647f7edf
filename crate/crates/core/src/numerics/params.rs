use std::collections::BTreeMap;

use super::{Array, Graph, NumericsError, Real, Var};

/// Named, shaped parameter arrays in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    arrays: BTreeMap<String, Array<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Array<T>, NumericsError> {
        self.arrays
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.arrays.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array<T>)> {
        self.arrays.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array<T>)> {
        self.arrays.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.arrays.keys()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    /// Total scalar count over all arrays.
    pub fn total_size(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Puts a parameter on the graph: trainable leaf or constant.
    pub fn var(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var, NumericsError> {
        let value = self.get(name)?.clone();
        Ok(if trainable {
            g.param(name, value)
        } else {
            g.constant(value)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(Array::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Merges `other` into `self`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) {
        for (k, v) in other.arrays {
            let prev = self.arrays.insert(k.clone(), v);
            debug_assert!(prev.is_none(), "duplicate parameter {k}");
        }
    }
}

impl<T: Real> FromIterator<(String, Array<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Array<T>)>>(iter: I) -> Self {
        Self {
            arrays: iter.into_iter().collect(),
        }
    }
}
