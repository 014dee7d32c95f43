//! Named parameter collections.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::ArrayD;

use crate::autodiff::Real;

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies a parameter across sets: the owning set's id plus the index
/// within it. Two different sets never share keys, so gradients from a tape
/// that touched several networks stay separate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    set: u64,
    index: usize,
}

/// An ordered collection of named tensors.
///
/// Order is insertion order and is part of the contract: optimizers align
/// their state to it and checkpoints serialize in it. Cloning produces an
/// independent set with a fresh identity.
#[derive(Debug)]
pub struct ParamSet<F> {
    id: u64,
    names: Vec<String>,
    values: Vec<ArrayD<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Clone> Clone for ParamSet<F> {
    fn clone(&self) -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
            by_name: self.by_name.clone(),
        }
    }
}

impl<F: Real> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under `name`. Panics on duplicates; layer
    /// construction is the only caller and duplicate names are a bug.
    pub fn add(&mut self, name: &str, value: ArrayD<F>) -> ParamKey {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        self.by_name.insert(name.to_string(), self.names.len() - 1);
        ParamKey { set: self.id, index: self.names.len() - 1 }
    }

    pub fn key(&self, name: &str) -> ParamKey {
        let index =
            *self.by_name.get(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        ParamKey { set: self.id, index }
    }

    pub fn try_key(&self, name: &str) -> Option<ParamKey> {
        self.by_name.get(name).map(|i| ParamKey { set: self.id, index: *i })
    }

    fn check(&self, key: ParamKey) -> usize {
        assert_eq!(key.set, self.id, "parameter key used on a different set");
        key.index
    }

    pub fn name(&self, key: ParamKey) -> &str {
        let i = self.check(key);
        &self.names[i]
    }

    pub fn value(&self, key: ParamKey) -> &ArrayD<F> {
        let i = self.check(key);
        &self.values[i]
    }

    pub fn value_mut(&mut self, key: ParamKey) -> &mut ArrayD<F> {
        let i = self.check(key);
        &mut self.values[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        let set = self.id;
        (0..self.names.len()).map(move |index| ParamKey { set, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from a same-shaped snapshot, keeping this set's identity.
    pub fn copy_values_from(&mut self, other: &ParamSet<F>) {
        assert_eq!(self.names, other.names, "parameter sets differ in layout");
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            dst.assign(src);
        }
    }

    /// Name of the first non-finite parameter tensor, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        for (name, v) in self.iter() {
            if v.iter().any(|x| !x.is_finite()) {
                return Some(name);
            }
        }
        None
    }
}

impl ParamSet<f32> {
    /// Hash of the exact bit content, for change-detection in tests and the
    /// minimax-discipline checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, v) in self.iter() {
            name.hash(&mut h);
            for x in v.iter() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn add_lookup_roundtrip() {
        let mut ps = ParamSet::<f32>::new();
        let k = ps.add("a.weight", ArrayD::zeros(IxDyn(&[2, 2])));
        assert_eq!(ps.key("a.weight"), k);
        assert_eq!(ps.name(k), "a.weight");
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn keys_do_not_cross_sets() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        let ka = a.add("w", ArrayD::zeros(IxDyn(&[1])));
        let kb = b.add("w", ArrayD::zeros(IxDyn(&[1])));
        assert_ne!(ka, kb);
        let result = std::panic::catch_unwind(|| b.value(ka).len());
        assert!(result.is_err(), "using a key on the wrong set must panic");
    }

    #[test]
    fn clone_gets_fresh_identity_but_restores_values() {
        let mut ps = ParamSet::<f32>::new();
        let k = ps.add("w", ArrayD::zeros(IxDyn(&[3])));
        let snapshot = ps.clone();
        assert_ne!(snapshot.key("w"), k);
        ps.value_mut(k)[[0]] = 5.0;
        ps.copy_values_from(&snapshot);
        assert_eq!(ps.value(k)[[0]], 0.0);
    }

    #[test]
    fn non_finite_detection_names_offender() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("ok", ArrayD::zeros(IxDyn(&[3])));
        let k = ps.add("bad", ArrayD::zeros(IxDyn(&[3])));
        assert!(ps.first_non_finite().is_none());
        ps.value_mut(k)[[1]] = f32::NAN;
        assert_eq!(ps.first_non_finite(), Some("bad"));
    }

    #[test]
    fn content_hash_tracks_bits() {
        let mut ps = ParamSet::<f32>::new();
        let k = ps.add("w", ArrayD::zeros(IxDyn(&[4])));
        let h0 = ps.content_hash();
        ps.value_mut(k)[[2]] = 1.0e-20;
        assert_ne!(h0, ps.content_hash());
    }
}
