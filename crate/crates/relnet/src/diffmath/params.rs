//! Named parameter storage shared by every network in the crate.
//!
//! Parameters live outside the tape; a forward pass binds them as leaves and
//! reads gradients back by the same index order after `backward`.

use rand::Rng;

use super::array::{Array, Scalar};
use super::tape::{Tape, Var};

/// Index of a parameter in a [`ParamStore`]. Stable for the store's lifetime.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of named parameter arrays.
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Xavier-uniform initialized matrix parameter.
    pub fn add_xavier<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let scale = T::from_f64((6.0 / (rows + cols) as f64).sqrt());
        self.add(name, Array::uniform(vec![rows, cols], scale, rng))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array<T>] {
        &mut self.values
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Lift every parameter through f64 into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
        }
    }
}

/// Tape leaves for one store binding, index-aligned with the store.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Scalar> Tape<T> {
    /// Register every parameter of `store` as a leaf on this tape.
    pub fn bind(&mut self, store: &ParamStore<T>) -> Bound {
        let vars = store
            .values()
            .iter()
            .map(|v| self.leaf(v.clone()))
            .collect();
        Bound { vars }
    }

    /// Gradients per parameter after `backward`, zeros where none flowed.
    pub fn param_grads(&self, bound: &Bound) -> Vec<Array<T>> {
        bound.vars.iter().map(|&v| self.grad_or_zeros(v)).collect()
    }
}
