//! Average-initialized merge encoder: a three-layer MLP whose output is a
//! residual on top of the elementwise mean of the K input embeddings, plus
//! block partitioning, padding, and the exact-match K-gram cache.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams};
use crate::params::ParamStore;
use crate::tensor::{raw_gelu, raw_matmul, Graph, NodeId, ParamId, Scalar, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitStrategy {
    /// Final layer near zero: output starts at the block mean (the default).
    Average,
    /// Final layer standard init; no mean-residual guarantee at start.
    RandomFinal,
    /// Every layer standard init.
    RandomFull,
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("expected a block of {want} vectors of dim {dim}, got {got}")]
    BlockSize { want: usize, dim: usize, got: usize },
    #[error("merge factor K must be >= 1, got {0}")]
    BadK(usize),
    #[error("token sequence must be nonempty")]
    EmptyTokens,
    #[error("stale k-gram cache: cache tag {cache_tag} vs encoder version {current}")]
    StaleCache { cache_tag: u64, current: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Three-layer residual encoder `K*d -> 4d -> 4d -> d` with GELU hiddens.
#[derive(Debug, Clone)]
pub struct MergeEncoder {
    pub k: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
    /// Bumped whenever encoder weights change; guards the k-gram cache.
    pub version: u64,
}

impl MergeEncoder {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        k: usize,
        embed_dim: usize,
        strategy: InitStrategy,
        seed: u64,
    ) -> Result<Self, EncoderError> {
        if k < 1 {
            return Err(EncoderError::BadK(k));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = embed_dim;
        let h = 4 * d;
        let std_in = 1.0 / ((k * d) as f64).sqrt();
        let std_h = 1.0 / (h as f64).sqrt();
        // The average strategy needs |net(x)| <= 1e-5 per component at init for
        // any plausible block scale. The final matmul sums 4d hidden units, so
        // the per-component std is roughly std_final * sqrt(4d); 1e-7 keeps the
        // tail of that sum an order of magnitude under the budget at d=128.
        let std_final = match strategy {
            InitStrategy::Average => 1e-7,
            InitStrategy::RandomFinal | InitStrategy::RandomFull => std_h,
        };
        let w1 = store.add_gaussian("enc.w1", k * d, h, std_in, true, &mut rng);
        let b1 = store.add_zeros("enc.b1", 1, h, true);
        let w2 = store.add_gaussian("enc.w2", h, h, std_h, true, &mut rng);
        let b2 = store.add_zeros("enc.b2", 1, h, true);
        let w3 = store.add_gaussian("enc.w3", h, d, std_final, true, &mut rng);
        let b3 = store.add_zeros("enc.b3", 1, d, true);
        Ok(MergeEncoder { k, embed_dim: d, hidden_dim: h, w1, b1, w2, b2, w3, b3, version: 0 })
    }

    pub fn from_store<S: Scalar>(store: &ParamStore<S>, k: usize, embed_dim: usize) -> Result<Self, EncoderError> {
        let get = |n: &str| {
            store
                .lookup(n)
                .ok_or_else(|| EncoderError::Tensor(TensorError::Contract {
                    op: "encoder_from_store",
                    msg: format!("missing parameter {n}"),
                }))
        };
        Ok(MergeEncoder {
            k,
            embed_dim,
            hidden_dim: 4 * embed_dim,
            w1: get("enc.w1")?,
            b1: get("enc.b1")?,
            w2: get("enc.w2")?,
            b2: get("enc.b2")?,
            w3: get("enc.w3")?,
            b3: get("enc.b3")?,
            version: 0,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    /// Graph forward over one `[K, d]` block: `mean(block) + net(flatten(block))`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        block: NodeId,
    ) -> Result<NodeId, EncoderError> {
        let (rows, cols) = g.shape(block);
        if rows != self.k || cols != self.embed_dim {
            return Err(EncoderError::BlockSize { want: self.k, dim: self.embed_dim, got: rows });
        }
        let mean = g.mean_rows(block);
        let flat = g.reshape(block, 1, self.k * self.embed_dim)?;
        let res = self.net(g, store, flat)?;
        Ok(g.add(mean, res)?)
    }

    /// The inner MLP alone (no mean residual), on a `[1, K*d]` row.
    pub fn net<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        flat: NodeId,
    ) -> Result<NodeId, EncoderError> {
        let w1 = store.node(g, self.w1);
        let b1 = store.node(g, self.b1);
        let h = g.matmul(flat, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.gelu(h);
        let w2 = store.node(g, self.w2);
        let b2 = store.node(g, self.b2);
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, b2)?;
        let h = g.gelu(h);
        let w3 = store.node(g, self.w3);
        let b3 = store.node(g, self.b3);
        let h = g.matmul(h, w3)?;
        Ok(g.add_row(h, b3)?)
    }

    /// Tape-free forward used during evaluation; arithmetic mirrors the graph
    /// path operation-for-operation so results are bit-identical.
    pub fn eval_block<S: Scalar>(&self, store: &ParamStore<S>, block: &[S]) -> Result<Vec<S>, EncoderError> {
        let d = self.embed_dim;
        if block.len() != self.k * d {
            return Err(EncoderError::BlockSize { want: self.k, dim: d, got: block.len() / d });
        }
        let kk = crate::tensor::lit::<S>(self.k as f64);
        let mut mean = vec![S::zero(); d];
        for r in 0..self.k {
            for j in 0..d {
                mean[j] = mean[j] + block[r * d + j];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / kk);

        // matmul-then-bias ordering mirrors the graph path exactly so cached
        // and fresh evaluations stay bit-identical with graph outputs
        let h = self.hidden_dim;
        let mut h1 = vec![S::zero(); h];
        raw_matmul(block, store.data(self.w1), 1, self.k * d, h, &mut h1);
        for (v, &b) in h1.iter_mut().zip(store.data(self.b1)) {
            *v = raw_gelu(*v + b);
        }
        let mut h2 = vec![S::zero(); h];
        raw_matmul(&h1, store.data(self.w2), 1, h, h, &mut h2);
        for (v, &b) in h2.iter_mut().zip(store.data(self.b2)) {
            *v = raw_gelu(*v + b);
        }
        let mut out = vec![S::zero(); d];
        raw_matmul(&h2, store.data(self.w3), 1, h, d, &mut out);
        for (j, (v, &b)) in out.iter_mut().zip(store.data(self.b3)).enumerate() {
            *v = mean[j] + (*v + b);
        }
        Ok(out)
    }
}

/// How a token sequence maps onto K-sized blocks after padding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub original_len: usize,
    pub padded_len: usize,
    pub n_blocks: usize,
    pub pad_token: usize,
}

/// Split `tokens` into contiguous K-blocks, padding the tail with `pad_token`.
pub fn partition_and_pad(
    tokens: &[usize],
    k: usize,
    pad_token: usize,
) -> Result<(BlockPartition, Vec<Vec<usize>>), EncoderError> {
    if k < 1 {
        return Err(EncoderError::BadK(k));
    }
    if tokens.is_empty() {
        return Err(EncoderError::EmptyTokens);
    }
    let n_blocks = tokens.len().div_ceil(k);
    let padded_len = n_blocks * k;
    let mut padded = tokens.to_vec();
    padded.resize(padded_len, pad_token);
    let blocks = padded.chunks(k).map(|c| c.to_vec()).collect();
    Ok((
        BlockPartition { original_len: tokens.len(), padded_len, n_blocks, pad_token },
        blocks,
    ))
}

/// Exact-match LRU cache from K-gram to compressed embedding. Used only on
/// the no-gradient evaluation path; hits are bit-identical to fresh encoder
/// evaluation under the same weights.
#[derive(Debug, Clone)]
pub struct KGramCache<S> {
    map: HashMap<Vec<usize>, (u64, Vec<S>)>,
    capacity: usize,
    clock: u64,
    pub generation_tag: u64,
    pub hits: u64,
    pub misses: u64,
}

impl<S: Scalar> KGramCache<S> {
    pub fn new(capacity: usize, generation_tag: u64) -> Self {
        KGramCache {
            map: HashMap::new(),
            capacity: capacity.max(1),
            clock: 0,
            generation_tag,
            hits: 0,
            misses: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn get(&mut self, key: &[usize]) -> Option<Vec<S>> {
        self.clock += 1;
        let clock = self.clock;
        if let Some((stamp, v)) = self.map.get_mut(key) {
            *stamp = clock;
            self.hits += 1;
            Some(v.clone())
        } else {
            self.misses += 1;
            None
        }
    }

    fn insert(&mut self, key: Vec<usize>, value: Vec<S>) {
        if self.map.len() >= self.capacity && !self.map.contains_key(&key) {
            // evict least-recently-used
            if let Some(victim) = self
                .map
                .iter()
                .min_by_key(|(_, (stamp, _))| *stamp)
                .map(|(k, _)| k.clone())
            {
                self.map.remove(&victim);
            }
        }
        self.clock += 1;
        self.map.insert(key, (self.clock, value));
    }
}

/// Compress a token prefix into `ceil(len/K)` embeddings (evaluation path,
/// no gradients). With a cache, results are bit-identical to the uncached run.
pub fn compress_prefix<S: Scalar>(
    enc: &MergeEncoder,
    store: &ParamStore<S>,
    model: &ModelParams,
    tokens: &[usize],
    pad_token: usize,
    mut cache: Option<&mut KGramCache<S>>,
) -> Result<Vec<Vec<S>>, EncoderError> {
    if let Some(c) = cache.as_deref_mut() {
        if c.generation_tag != enc.version {
            return Err(EncoderError::StaleCache { cache_tag: c.generation_tag, current: enc.version });
        }
    }
    let (_, blocks) = partition_and_pad(tokens, enc.k, pad_token)?;
    let d = enc.embed_dim;
    let mut out = Vec::with_capacity(blocks.len());
    for block in &blocks {
        if let Some(c) = cache.as_deref_mut() {
            if let Some(hit) = c.get(block) {
                out.push(hit);
                continue;
            }
        }
        let embs = model.embed_tokens(store, block)?;
        let mut flat = Vec::with_capacity(enc.k * d);
        for e in &embs {
            flat.extend_from_slice(e);
        }
        let v = enc.eval_block(store, &flat)?;
        if let Some(c) = cache.as_deref_mut() {
            c.insert(block.clone(), v.clone());
        }
        out.push(v);
    }
    Ok(out)
}

/// Graph-path compression for training: returns one `[1, d]` node per block,
/// with gradients flowing into both the encoder and the embedding table.
pub fn compress_prefix_graph<S: Scalar>(
    g: &mut Graph<S>,
    enc: &MergeEncoder,
    store: &ParamStore<S>,
    model: &ModelParams,
    tokens: &[usize],
    pad_token: usize,
) -> Result<Vec<NodeId>, EncoderError> {
    let (_, blocks) = partition_and_pad(tokens, enc.k, pad_token)?;
    let emb = store.node(g, model.emb);
    let mut out = Vec::with_capacity(blocks.len());
    for block in &blocks {
        for &t in block {
            if t >= model.config.vocab_size {
                return Err(EncoderError::Model(ModelError::Vocab {
                    id: t,
                    vocab: model.config.vocab_size,
                }));
            }
        }
        let rows = g.gather_rows(emb, block)?;
        out.push(enc.forward(g, store, rows)?);
    }
    Ok(out)
}
