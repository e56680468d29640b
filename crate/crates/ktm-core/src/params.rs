//! Named parameter storage shared between the model, the merge encoder,
//! the optimizer, and the checkpoint container.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{lit, Graph, NodeId, ParamId, Scalar};

#[derive(Debug, Clone)]
pub struct ParamEntry<S> {
    pub name: String,
    pub data: Arc<Vec<S>>,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
}

/// Flat registry of named weight tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    index: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, data: Vec<S>, rows: usize, cols: usize, trainable: bool) -> ParamId {
        assert_eq!(data.len(), rows * cols, "param {name}: data length vs shape");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            data: Arc::new(data),
            rows,
            cols,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn add_gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let data: Vec<S> = (0..rows * cols).map(|_| lit::<S>(gauss(rng) * std)).collect();
        self.add(name, data, rows, cols, trainable)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> ParamId {
        self.add(name, vec![S::zero(); rows * cols], rows, cols, trainable)
    }

    pub fn add_ones(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> ParamId {
        self.add(name, vec![S::one(); rows * cols], rows, cols, trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn data(&self, id: ParamId) -> &[S] {
        &self.entries[id.0].data
    }

    /// Mutable view of a parameter's buffer (clones only if a graph still
    /// holds the old version).
    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<S> {
        Arc::make_mut(&mut self.entries[id.0].data)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<S>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    /// Insert a parameter into a graph as a (shared) leaf node.
    pub fn node(&self, g: &mut Graph<S>, id: ParamId) -> NodeId {
        let e = &self.entries[id.0];
        g.param(id, Arc::clone(&e.data), e.rows, e.cols, e.trainable)
    }
}

/// Standard normal draw (Box-Muller).
pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
