//! Named parameter storage and its binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use super::rng::{Purpose, RngStream};
use super::tape::{Gradients, Tape, Var};
use super::{DenseArray, NumericError};

/// Named tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, DenseArray>,
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DenseArray)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DenseArray)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(DenseArray::len).sum()
    }

    /// Gaussian initialisation with standard deviation `std`. The draw for a
    /// tensor depends only on `(seed, name)`.
    pub fn init_normal(&mut self, seed: u64, name: &str, shape: &[usize], std: f64) {
        let mut rng = RngStream::new(seed, Purpose::Init, fnv1a(name));
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.insert(name, DenseArray::from_parts(shape.to_vec(), data));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, DenseArray::zeros(shape));
    }

    pub fn init_filled(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, DenseArray::filled(shape, value));
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<(), NumericError> {
        for (name, t) in &self.tensors {
            match other.get(name) {
                None => return Err(NumericError::Shape(format!("missing tensor {name}"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(NumericError::Shape(format!(
                        "tensor {name}: expected shape {:?}, found {:?}",
                        t.shape(),
                        o.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.names().find(|n| !self.contains(n)) {
            return Err(NumericError::Shape(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Flattens all tensors, in name order, into one vector.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "assign_flat length");
        let mut off = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

/// One forward evaluation: a tape plus lazily created leaves for the
/// parameters it touches.
pub struct Binding<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    vars: HashMap<String, Var>,
    trainable: bool,
}

impl<'p> Binding<'p> {
    /// Parameters become differentiable leaves.
    pub fn new(store: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), store, vars: HashMap::new(), trainable: true }
    }

    /// Parameters become constants; nothing is retained for a backward pass
    /// beyond the forward values.
    pub fn frozen(store: &'p ParamStore) -> Self {
        Self { tape: Tape::new(), store, vars: HashMap::new(), trainable: false }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// Leaf for parameter `name`. Panics if the store lacks it, since
    /// parameter names are fixed by the model layout.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not initialised"))
            .clone();
        let v = if self.trainable { self.tape.param(value) } else { self.tape.constant(value) };
        self.vars.insert(name.to_owned(), v);
        v
    }

    pub fn constant(&mut self, value: DenseArray) -> Var {
        self.tape.constant(value)
    }

    /// Gradients for every parameter in the store (zeros for untouched ones),
    /// in name order.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.store
            .iter()
            .map(|(name, t)| {
                let g = match self.vars.get(name) {
                    Some(&v) => grads.get_or_zero(v, t.len()),
                    None => vec![0.0; t.len()],
                };
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_name() {
        let mut a = ParamStore::new();
        a.init_normal(3, "x", &[2, 2], 1.0);
        a.init_normal(3, "y", &[3], 1.0);
        let mut b = ParamStore::new();
        b.init_normal(3, "y", &[3], 1.0);
        b.init_normal(3, "x", &[2, 2], 1.0);
        assert_eq!(a, b);
        assert_ne!(a.get("x").unwrap().data()[0], a.get("y").unwrap().data()[0]);
    }

    #[test]
    fn compatibility_detects_shape_mismatch() {
        let mut a = ParamStore::new();
        a.init_zeros("w", &[2, 3]);
        let mut b = ParamStore::new();
        b.init_zeros("w", &[3, 2]);
        assert!(a.check_compatible(&b).is_err());
        assert!(a.check_compatible(&a.clone()).is_ok());
    }

    #[test]
    fn flat_round_trip() {
        let mut a = ParamStore::new();
        a.init_normal(1, "a", &[2], 1.0);
        a.init_normal(1, "b", &[3], 1.0);
        let flat = a.flatten();
        let mut b = a.clone();
        b.assign_flat(&vec![0.0; 5]);
        b.assign_flat(&flat);
        assert_eq!(a, b);
    }
}
