//! Decoder-only causal transformer with LoRA adapters on every attention
//! and MLP projection. Pre-LN blocks, learned absolute positional embeddings
//! (one position per slot of the mixed sequence), GELU MLP.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::{lit, Graph, NodeId, ParamId, Scalar, TensorError};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout_p: f64,
}

impl ModelConfig {
    /// Desk-scale default: trainable in minutes on CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 512,
            dropout_p: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::Config(format!("vocab_size {} < 2", self.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Capacity { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocab { id: usize, vocab: usize },
    #[error("input dimension {got} does not match embed_dim {want}")]
    Dim { got: usize, want: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// LoRA factor pair wrapping one base weight. `b` is zero-initialized so the
/// adapted map equals the base map before any optimizer step.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: ParamId, // [r, d_in]
    pub b: ParamId, // [d_out, r]
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
    pub target: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 4, alpha: 16.0, dropout_p: 0.05 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub w1: ParamId, // [d, 4d]
    pub b1: ParamId,
    pub w2: ParamId, // [4d, d]
    pub b2: ParamId,
}

/// Handles into the [`ParamStore`] for every base weight of the model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub emb: ParamId, // [V, d]
    pub pos: ParamId, // [max_seq_len, d]
    pub layers: Vec<LayerParams>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub unembed: ParamId, // [d, V]
}

/// One adapter per attention/MLP projection per layer.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub config: LoraConfig,
    pub adapters: Vec<LoraAdapter>,
}

impl ModelParams {
    /// Initialize base weights into `store`. Deterministic in `seed`.
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let v = config.vocab_size;
        let std = 0.02;
        // residual-path projections scaled down by depth
        let std_res = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let emb = store.add_gaussian("emb", v, d, std, true, &mut rng);
        let pos = store.add_gaussian("pos", config.max_seq_len, d, std, true, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                ln1_g: store.add_ones(&p("ln1.g"), 1, d, true),
                ln1_b: store.add_zeros(&p("ln1.b"), 1, d, true),
                wq: store.add_gaussian(&p("wq"), d, d, std, true, &mut rng),
                wk: store.add_gaussian(&p("wk"), d, d, std, true, &mut rng),
                wv: store.add_gaussian(&p("wv"), d, d, std, true, &mut rng),
                wo: store.add_gaussian(&p("wo"), d, d, std_res, true, &mut rng),
                ln2_g: store.add_ones(&p("ln2.g"), 1, d, true),
                ln2_b: store.add_zeros(&p("ln2.b"), 1, d, true),
                w1: store.add_gaussian(&p("mlp.w1"), d, 4 * d, std, true, &mut rng),
                b1: store.add_zeros(&p("mlp.b1"), 1, 4 * d, true),
                w2: store.add_gaussian(&p("mlp.w2"), 4 * d, d, std_res, true, &mut rng),
                b2: store.add_zeros(&p("mlp.b2"), 1, d, true),
            });
        }
        let final_ln_g = store.add_ones("final_ln.g", 1, d, true);
        let final_ln_b = store.add_zeros("final_ln.b", 1, d, true);
        let unembed = store.add_gaussian("unembed", d, v, std, true, &mut rng);
        Ok(ModelParams { config: config.clone(), emb, pos, layers, final_ln_g, final_ln_b, unembed })
    }

    /// Rebuild handles from a store that already contains the named tensors
    /// (checkpoint load path).
    pub fn from_store<S: Scalar>(store: &ParamStore<S>, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let get = |n: &str| {
            store
                .lookup(n)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {n}")))
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                ln1_g: get(&p("ln1.g"))?,
                ln1_b: get(&p("ln1.b"))?,
                wq: get(&p("wq"))?,
                wk: get(&p("wk"))?,
                wv: get(&p("wv"))?,
                wo: get(&p("wo"))?,
                ln2_g: get(&p("ln2.g"))?,
                ln2_b: get(&p("ln2.b"))?,
                w1: get(&p("mlp.w1"))?,
                b1: get(&p("mlp.b1"))?,
                w2: get(&p("mlp.w2"))?,
                b2: get(&p("mlp.b2"))?,
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            emb: get("emb")?,
            pos: get("pos")?,
            layers,
            final_ln_g: get("final_ln.g")?,
            final_ln_b: get("final_ln.b")?,
            unembed: get("unembed")?,
        })
    }

    /// Row lookup into the embedding table.
    pub fn embed_tokens<S: Scalar>(&self, store: &ParamStore<S>, tokens: &[usize]) -> Result<Vec<Vec<S>>, ModelError> {
        let d = self.config.embed_dim;
        let table = store.data(self.emb);
        tokens
            .iter()
            .map(|&t| {
                if t >= self.config.vocab_size {
                    Err(ModelError::Vocab { id: t, vocab: self.config.vocab_size })
                } else {
                    Ok(table[t * d..(t + 1) * d].to_vec())
                }
            })
            .collect()
    }
}

impl LoraSet {
    /// One adapter per {wq,wk,wv,wo,mlp.w1,mlp.w2} per layer; A small
    /// Gaussian, B zero.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        model: &ModelConfig,
        config: &LoraConfig,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.embed_dim;
        let r = config.rank;
        let mut adapters = Vec::new();
        for l in 0..model.n_layers {
            for (target, d_in, d_out) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("mlp.w1", d, 4 * d),
                ("mlp.w2", 4 * d, d),
            ] {
                let name = format!("layer{l}.{target}");
                let a = store.add_gaussian(&format!("{name}.lora_a"), r, d_in, 0.01, true, &mut rng);
                let b = store.add_zeros(&format!("{name}.lora_b"), d_out, r, true);
                adapters.push(LoraAdapter {
                    a,
                    b,
                    rank: r,
                    alpha: config.alpha,
                    dropout_p: config.dropout_p,
                    target: name,
                });
            }
        }
        LoraSet { config: config.clone(), adapters }
    }

    pub fn from_store<S: Scalar>(
        store: &ParamStore<S>,
        model: &ModelConfig,
        config: &LoraConfig,
    ) -> Result<Self, ModelError> {
        let d = model.embed_dim;
        let mut adapters = Vec::new();
        for l in 0..model.n_layers {
            for (target, _d_in, _d_out) in [
                ("wq", d, d),
                ("wk", d, d),
                ("wv", d, d),
                ("wo", d, d),
                ("mlp.w1", d, 4 * d),
                ("mlp.w2", 4 * d, d),
            ] {
                let name = format!("layer{l}.{target}");
                let a = store
                    .lookup(&format!("{name}.lora_a"))
                    .ok_or_else(|| ModelError::Config(format!("missing {name}.lora_a")))?;
                let b = store
                    .lookup(&format!("{name}.lora_b"))
                    .ok_or_else(|| ModelError::Config(format!("missing {name}.lora_b")))?;
                adapters.push(LoraAdapter {
                    a,
                    b,
                    rank: config.rank,
                    alpha: config.alpha,
                    dropout_p: config.dropout_p,
                    target: name,
                });
            }
        }
        Ok(LoraSet { config: config.clone(), adapters })
    }

    fn find(&self, target: &str) -> &LoraAdapter {
        self.adapters
            .iter()
            .find(|a| a.target == target)
            .expect("adapter exists for every projection")
    }
}

/// Context for one forward pass through the transformer.
pub struct Forward<'a, S: Scalar> {
    pub store: &'a ParamStore<S>,
    pub model: &'a ModelParams,
    pub lora: Option<&'a LoraSet>,
    pub train_mode: bool,
    pub rng: ChaCha8Rng,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(store: &'a ParamStore<S>, model: &'a ModelParams, lora: Option<&'a LoraSet>) -> Self {
        Forward { store, model, lora, train_mode: false, rng: ChaCha8Rng::seed_from_u64(0) }
    }

    pub fn train(mut self, rng_seed: u64) -> Self {
        self.train_mode = true;
        self.rng = ChaCha8Rng::seed_from_u64(rng_seed);
        self
    }

    /// Base projection plus scaled LoRA path: `x W + (alpha/r) drop(x) A^T B^T`.
    fn proj(&mut self, g: &mut Graph<S>, x: NodeId, w: ParamId, target: &str) -> Result<NodeId, ModelError> {
        let wn = self.store.node(g, w);
        let mut y = g.matmul(x, wn)?;
        if let Some(lora) = self.lora {
            let ad = lora.find(target);
            let xa = if self.train_mode && ad.dropout_p > 0.0 {
                g.dropout(x, ad.dropout_p, &mut self.rng)
            } else {
                x
            };
            let a = self.store.node(g, ad.a);
            let b = self.store.node(g, ad.b);
            let t = g.matmul_nt(xa, a)?; // [s, r]
            let t = g.matmul_nt(t, b)?; // [s, d_out]
            let scaled = g.scale(t, lit::<S>(ad.alpha / ad.rank as f64));
            y = g.add(y, scaled)?;
        }
        Ok(y)
    }

    /// Run the transformer over a `[s, d]` matrix of input embeddings and
    /// return `[s, V]` logits. Causal: row `t` sees rows `<= t` only.
    pub fn forward_lm(&mut self, g: &mut Graph<S>, inputs: NodeId) -> Result<NodeId, ModelError> {
        let cfg = &self.model.config;
        let (s, dim) = g.shape(inputs);
        if dim != cfg.embed_dim {
            return Err(ModelError::Dim { got: dim, want: cfg.embed_dim });
        }
        if s > cfg.max_seq_len {
            return Err(ModelError::Capacity { len: s, max: cfg.max_seq_len });
        }
        let d = cfg.embed_dim;
        let n_heads = cfg.n_heads;
        let dh = d / n_heads;
        let scale = lit::<S>(1.0 / (dh as f64).sqrt());

        let pos_table = self.store.node(g, self.model.pos);
        let pos_ids: Vec<usize> = (0..s).collect();
        let pos = g.gather_rows(pos_table, &pos_ids)?;
        let mut x = g.add(inputs, pos)?;

        // additive causal mask, shared across heads
        let neg = lit::<S>(-1e9);
        let mut mask = vec![S::zero(); s * s];
        for i in 0..s {
            for j in (i + 1)..s {
                mask[i * s + j] = neg;
            }
        }
        let mask = g.constant(mask, s, s);

        let layers = self.model.layers.clone();
        for (l, layer) in layers.iter().enumerate() {
            let ln1_g = self.store.node(g, layer.ln1_g);
            let ln1_b = self.store.node(g, layer.ln1_b);
            let xn = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = self.proj(g, xn, layer.wq, &format!("layer{l}.wq"))?;
            let k = self.proj(g, xn, layer.wk, &format!("layer{l}.wk"))?;
            let v = self.proj(g, xn, layer.wv, &format!("layer{l}.wv"))?;
            let mut heads = Vec::with_capacity(n_heads);
            for h in 0..n_heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask)?;
                let probs = g.softmax_rows(scores)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let attn = self.proj(g, cat, layer.wo, &format!("layer{l}.wo"))?;
            x = g.add(x, attn)?;

            let ln2_g = self.store.node(g, layer.ln2_g);
            let ln2_b = self.store.node(g, layer.ln2_b);
            let hn = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let h1 = self.proj(g, hn, layer.w1, &format!("layer{l}.mlp.w1"))?;
            let b1 = self.store.node(g, layer.b1);
            let h1 = g.add_row(h1, b1)?;
            let h1 = g.gelu(h1);
            let h2 = self.proj(g, h1, layer.w2, &format!("layer{l}.mlp.w2"))?;
            let b2 = self.store.node(g, layer.b2);
            let h2 = g.add_row(h2, b2)?;
            x = g.add(x, h2)?;
        }

        let fg = self.store.node(g, self.model.final_ln_g);
        let fb = self.store.node(g, self.model.final_ln_b);
        let xf = g.layer_norm(x, fg, fb, LN_EPS)?;
        let un = self.store.node(g, self.model.unembed);
        Ok(g.matmul(xf, un)?)
    }
}

/// The exact set of parameter ids updated during training.
///
/// `full_finetune=false`: all LoRA factors plus every encoder weight, base
/// weights excluded. `full_finetune=true`: everything.
pub fn trainable_parameters<S: Scalar>(
    store: &ParamStore<S>,
    lora: &LoraSet,
    encoder_param_ids: &[ParamId],
    full_finetune: bool,
) -> Vec<ParamId> {
    if full_finetune {
        return store.iter().map(|(id, _)| id).collect();
    }
    let mut ids: Vec<ParamId> = lora
        .adapters
        .iter()
        .flat_map(|a| [a.a, a.b])
        .chain(encoder_param_ids.iter().copied())
        .collect();
    ids.sort();
    ids.dedup();
    ids
}

/// Mark exactly `ids` trainable in the store.
pub fn apply_trainable<S: Scalar>(store: &mut ParamStore<S>, ids: &[ParamId]) {
    let set: std::collections::HashSet<ParamId> = ids.iter().copied().collect();
    let all: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in all {
        store.set_trainable(id, set.contains(&id));
    }
}
