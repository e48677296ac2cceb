//! Named trainable parameters and their gradients.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat store of named matrices. Names are unique and use `/` as a
/// hierarchy separator (`encoder/blocks/0/query/qkv/weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name: parameter layout
    /// is fixed at model construction, so a clash is a programming error.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Overwrites a parameter's values from `value`, checking its shape.
    pub fn assign(&mut self, name: &str, value: Matrix) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Shape { what: "parameter assignment", expected: slot.len(), got: value.len() });
        }
        *slot = value;
        Ok(())
    }
}

/// Gradient accumulator aligned with a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn new(store: &ParamStore) -> Self {
        Self { grads: (0..store.len()).map(|_| None).collect() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.add_assign(grad),
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.grads.iter().flatten().map(Matrix::sq_norm).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }
}

/// Gaussian-initialised matrix with the given standard deviation.
pub fn randn<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_indexed() {
        let mut s = ParamStore::new();
        let a = s.add("a/w", Matrix::zeros(2, 2));
        let b = s.add("b/w", Matrix::identity(3));
        assert_eq!(s.id("a/w"), Some(a));
        assert_eq!(s.by_name("b/w"), Some(&Matrix::identity(3)));
        assert_eq!(s.name(b), "b/w");
        assert_eq!(s.numel(), 13);
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_name_panics() {
        let mut s = ParamStore::new();
        s.add("x", Matrix::zeros(1, 1));
        s.add("x", Matrix::zeros(1, 1));
    }

    #[test]
    fn grads_accumulate() {
        let mut s = ParamStore::new();
        let a = s.add("a", Matrix::zeros(1, 2));
        let mut g = ParamGrads::new(&s);
        g.accumulate(a, &Matrix::row_vector(alloc::vec![1.0, 2.0]));
        g.accumulate(a, &Matrix::row_vector(alloc::vec![1.0, 2.0]));
        assert_eq!(g.get(a).unwrap().as_slice(), &[2.0, 4.0]);
        assert!((g.global_norm() - libm::sqrt(20.0)).abs() < 1e-12);
    }
}
