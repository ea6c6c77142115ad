//! Named parameter storage with trainable flags and content hashing.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub trainable: bool,
}

/// All model parameters, keyed by dotted names (`img.block0.attn.wq`, ...).
/// BTreeMap keeps iteration order deterministic for hashing and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>, trainable: bool) {
        self.entries.insert(
            name.to_string(),
            Param { value, trainable },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::runtime(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::runtime(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// FNV-1a over names and value bit patterns of parameters under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (name, p) in self.entries.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            eat(name.as_bytes());
            for v in p.value.iter() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Fills a new parameter with i.i.d. Gaussian entries of the given std.
    pub fn init_gaussian(
        &mut self,
        name: &str,
        shape: (usize, usize),
        std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) {
        let v = Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std);
        self.insert(name, v, trainable);
    }

    pub fn init_zeros(&mut self, name: &str, shape: (usize, usize), trainable: bool) {
        self.insert(name, Array2::zeros(shape), trainable);
    }

    pub fn init_ones(&mut self, name: &str, shape: (usize, usize), trainable: bool) {
        self.insert(name, Array2::ones(shape), trainable);
    }

    /// Identity matrix plus Gaussian noise; used for near-identity init.
    pub fn init_near_identity(
        &mut self,
        name: &str,
        dim: usize,
        noise_std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) {
        let mut v = Array2::from_shape_fn((dim, dim), |_| {
            rng.sample::<f64, _>(StandardNormal) * noise_std
        });
        for i in 0..dim {
            v[(i, i)] += 1.0;
        }
        self.insert(name, v, trainable);
    }
}

/// One forward pass: a tape plus the mapping from parameter names to the tape
/// leaves holding their current values.
pub struct Graph<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: BTreeMap::new(),
        }
    }

    /// Leaf var for a named parameter (created on first use).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|_| panic!("unknown parameter {name}"))
            .value
            .clone();
        let v = self.tape.leaf(value);
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Gradients of every parameter touched in this pass, keyed by name.
    /// Call after `tape.backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(n, v)| (n.clone(), self.tape.grad(*v).clone()))
            .collect()
    }
}
