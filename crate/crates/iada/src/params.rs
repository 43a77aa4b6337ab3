//! Named parameter storage shared by the backbone, adapters, and aggregator.
//!
//! Parameters live outside any computation graph. Each forward pass binds the
//! ones it uses as tape leaves; after backward, leaf gradients are accumulated
//! back into the store in registration order, which keeps batched gradient
//! reduction deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Adapter,
    Aggregator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Gaussian with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter {name}"
        );
        let n = rows * cols;
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(v) => vec![v; n],
            Init::Normal(std) => (0..n).map(|_| gauss(rng) * std).collect(),
        };
        self.params.push(Param {
            name: name.clone(),
            rows,
            cols,
            data,
            grad: vec![0.0; n],
            group,
        });
        let id = self.params.len() - 1;
        self.by_name.insert(name, id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn total_elements(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.data.len())
            .sum()
    }

    /// Raw bytes of every parameter in a group, for frozen-weight assertions.
    pub fn group_bytes(&self, group: ParamGroup) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Per-pass mapping from store parameters to tape leaves.
pub struct Binding {
    entries: Vec<(ParamId, Var)>,
    cache: HashMap<usize, Var>,
}

impl Binding {
    pub fn new() -> Self {
        Binding {
            entries: Vec::new(),
            cache: HashMap::new(),
        }
    }

    /// Bind `id` as a requires-grad leaf, reusing the leaf if already bound.
    pub fn var(&mut self, g: &mut Graph, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.cache.get(&id.0) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = g.leaf(p.data.clone(), p.rows, p.cols, true)?;
        self.entries.push((id, v));
        self.cache.insert(id.0, v);
        Ok(v)
    }

    /// Accumulate tape gradients back into the store, in binding order.
    pub fn accumulate(&self, g: &Graph, store: &mut ParamStore) {
        for &(id, v) in &self.entries {
            if let Some(gr) = g.grad(v) {
                let p = store.get_mut(id);
                for (a, b) in p.grad.iter_mut().zip(gr) {
                    *a += b;
                }
            }
        }
    }
}

impl Default for Binding {
    fn default() -> Self {
        Self::new()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
