//! Named parameter storage and per-step tape binding.
//!
//! A [`ParamStore`] owns every learnable tensor by name (`"enc_img.conv0.k"`,
//! `"memory.m"`, ...). Each training step builds a fresh [`Tape`] through a
//! [`Session`], which lazily binds store tensors onto the tape — as gradient
//! leaves for trainable parameters, as constants for frozen ones — so a
//! parameter participates in exactly one tape node per step no matter how
//! many ops reference it.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: BTreeMap::new() }
    }

    /// Register a parameter. Duplicate names are construction bugs.
    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        let prev = self.params.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_len(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// sha-256 over `(name, dims, little-endian data)` in sorted name order.
    /// Identical stores (bitwise) produce identical checksums.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update((t.rank() as u64).to_le_bytes());
            for &d in t.dims() {
                h.update((d as u64).to_le_bytes());
            }
            let mut bytes = Vec::with_capacity(t.len() * S::DTYPE.byte_width());
            for &x in t.data() {
                x.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        h.finalize().iter().map(|b| format!("{:02x}", b)).collect()
    }
}

/// One forward/backward pass worth of tape, with lazy parameter binding.
pub struct Session<'s, S: Scalar> {
    pub tape: Tape<S>,
    store: &'s ParamStore<S>,
    bound: BTreeMap<String, Var>,
    frozen_prefixes: Vec<String>,
}

impl<'s, S: Scalar> Session<'s, S> {
    pub fn new(store: &'s ParamStore<S>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    /// Bind every parameter whose name starts with `prefix` as a tape
    /// constant: its value is used in the forward pass but no gradient is
    /// recorded for it. Must be called before the first `p()` touching a
    /// matching name.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        assert!(
            !self.bound.keys().any(|n| n.starts_with(prefix)),
            "freeze_prefix({prefix}) after a matching parameter was already bound"
        );
        self.frozen_prefixes.push(prefix.to_string());
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Fetch the tape var for a named parameter, binding it on first use.
    pub fn p(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self.store.get(name).clone();
        let v = if self.is_frozen(name) {
            self.tape.constant(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Parameters bound as trainable leaves this step, in name order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound
            .iter()
            .filter(|(name, _)| !self.is_frozen(name))
            .map(|(name, &v)| (name.as_str(), v))
    }
}
