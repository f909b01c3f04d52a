//! Named parameter storage and per-step graph binding.
//!
//! Model weights live in a [`ParamStore`] as plain arrays with a
//! trainable flag. Each training or inference pass creates a fresh graph
//! and a [`Fwd`] binder over it; the binder lazily turns store entries
//! into graph leaves (at most once per pass, so repeated uses share one
//! node and gradients accumulate correctly) and collects gradients back
//! out by name after `backward`.

use crate::error::{state_err, Result};
use dsdn_core::graph::Tensor;
use dsdn_core::{Array, Graph, Scalar};
use std::cell::RefCell;
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Array<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>, trainable: bool) {
        let name = name.into();
        assert!(
            self.map
                .insert(name.clone(), Param { value, trainable })
                .is_none(),
            "duplicate parameter `{name}`"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Total scalar count, for sizing reports.
    pub fn numel(&self) -> usize {
        self.map.values().map(|p| p.value.numel()).sum()
    }

    /// Merge another store under a name prefix. Trainability carries over.
    pub fn absorb(&mut self, prefix: &str, other: &ParamStore<T>) {
        for (name, p) in other.iter() {
            self.insert(format!("{prefix}{name}"), p.value.clone(), p.trainable);
        }
    }

    /// Split out every entry under a prefix, stripping it.
    pub fn extract(&self, prefix: &str) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in self.iter() {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest, p.value.clone(), p.trainable);
            }
        }
        out
    }
}

/// One forward pass over `graph`, reading parameters from `store`.
///
/// With `train` false every bound leaf is a constant, so inference builds
/// no gradient bookkeeping regardless of trainable flags.
pub struct Fwd<'a, T: Scalar> {
    pub graph: &'a Graph<T>,
    store: &'a ParamStore<T>,
    bound: RefCell<BTreeMap<String, Tensor<T>>>,
    train: bool,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Fwd {
            graph,
            store,
            bound: RefCell::new(BTreeMap::new()),
            train,
        }
    }

    pub fn training(&self) -> bool {
        self.train
    }

    /// Bind a parameter by name, reusing the leaf on repeat access.
    pub fn p(&self, name: &str) -> Result<Tensor<T>> {
        if let Some(t) = self.bound.borrow().get(name) {
            return Ok(t.clone());
        }
        let Some(param) = self.store.get(name) else {
            return state_err(format!("unknown parameter `{name}`"));
        };
        let leaf = self
            .graph
            .leaf(&param.value, self.train && param.trainable);
        self.bound
            .borrow_mut()
            .insert(name.to_string(), leaf.clone());
        Ok(leaf)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradients of every bound trainable parameter, by name. Call after
    /// `graph.backward`. Parameters that were never touched this pass are
    /// absent, and bound-but-unreached ones report a None gradient as
    /// absent too.
    pub fn grads(&self) -> BTreeMap<String, Array<T>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.bound.borrow().iter() {
            if let Some(g) = t.grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// He-style fan-in scaled normal init for conv and linear weights.
pub fn he_init<T: Scalar>(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Array<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    scaled_randn(rng, shape, std)
}

pub fn scaled_randn<T: Scalar>(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: &[usize],
    std: f64,
) -> Array<T> {
    let s = T::from_f64(std);
    Array::<T>::randn(rng, shape).map(|v| v * s)
}
