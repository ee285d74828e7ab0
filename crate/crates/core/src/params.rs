//! Named parameter storage, initialization, and the per-forward binding
//! context that maps parameters onto graph leaves.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Tensor<S>,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
    /// Excluded from weight decay: biases, normalization affines, LayerScale.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: String, value: Tensor<S>, trainable: bool, decay: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Overwrite a parameter by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let id = self
            .id_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn cast<D: Scalar>(&self) -> ParamStore<D> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values
/// from a seeded generator.
pub struct ParamBuilder<'a, S> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, S: Scalar> ParamBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_, S> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, decay: bool) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::from_f64c(self.rng.random_range(-bound..=bound)))
            .collect();
        let t = Tensor::new(shape, data).expect("shape product");
        let full = self.full_name(name);
        self.store.insert(full, t, true, decay)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, decay: bool) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, Tensor::full(shape, S::from_f64c(value)), true, decay)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full_name(name);
        self.store.insert(full, Tensor::full(shape, S::from_f64c(value)), false, false)
    }
}

/// Binding of parameters to graph nodes for one forward pass, plus the
/// execution mode (training vs inference) and its randomness.
pub struct Ctx<'a, S: Scalar> {
    pub params: &'a ParamStore<S>,
    bound: Vec<Option<NodeId>>,
    pub train: bool,
    /// Bind parameters as differentiable leaves.
    pub track_params: bool,
    pub dropout: f64,
    rng: ChaCha8Rng,
    /// Training-mode batch-norm nodes, for running-statistics updates.
    pub bn_nodes: Vec<(ParamId, ParamId, NodeId)>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    /// Inference: parameters are constants, dropout off, batch norm frozen.
    pub fn inference(params: &'a ParamStore<S>) -> Self {
        Self {
            params,
            bound: vec![None; params.len()],
            train: false,
            track_params: false,
            dropout: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_nodes: Vec::new(),
        }
    }

    /// Training: parameters are leaves, dropout with probability `dropout`
    /// drawn from a generator seeded by `seed`.
    pub fn training(params: &'a ParamStore<S>, dropout: f64, seed: u64) -> Self {
        Self {
            params,
            bound: vec![None; params.len()],
            train: true,
            track_params: true,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_nodes: Vec::new(),
        }
    }

    /// Gradient-check mode: inference semantics but parameters are leaves.
    pub fn tracking(params: &'a ParamStore<S>) -> Self {
        let mut c = Self::inference(params);
        c.track_params = true;
        c
    }

    pub fn p(&mut self, g: &mut Graph<S>, id: ParamId) -> NodeId {
        if let Some(n) = self.bound[id.0] {
            return n;
        }
        let v = self.params.get(id).clone();
        let n = if self.track_params && self.params.entry(id).trainable {
            g.leaf(v)
        } else {
            g.constant(v)
        };
        self.bound[id.0] = Some(n);
        n
    }

    /// Graph nodes of every bound parameter.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (ParamId(i), n)))
    }

    /// Inverted dropout on `x` when training with a positive rate.
    pub fn dropout(&mut self, g: &mut Graph<S>, x: NodeId) -> Result<NodeId> {
        if !self.train || self.dropout <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.dropout;
        let scale = S::from_f64c(1.0 / keep);
        let n = g.value(x).len();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { S::zero() })
            .collect();
        g.mul_const(x, mask)
    }
}
