use super::Scalar;
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Index of an entry inside a [`ParamStore`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct ParamId(pub usize);

/// A named parameter array and its gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.value[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.value[i * self.cols..(i + 1) * self.cols]
    }
}

/// Named parameter arrays in insertion order. Iteration order is fixed, which
/// keeps updates and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        value: Vec<T>,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name {name:?}")));
        }
        if rows * cols != value.len() {
            return Err(Error::Shape(format!(
                "parameter {name:?}: shape {rows}x{cols} does not match {} values",
                value.len()
            )));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            grad: vec![T::zero(); value.len()],
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Same names and shapes, values converted to another scalar type,
    /// gradients zeroed.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(
                &e.name,
                e.rows,
                e.cols,
                e.value.iter().map(|v| U::of(v.to_f64_lossy())).collect(),
            )
            .expect("names are unique in the source store");
        }
        out
    }
}
