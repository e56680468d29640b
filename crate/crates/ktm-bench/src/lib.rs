//! Shared fixtures for the merge benchmarks.

use ktm_core::data::Tokenizer;
use ktm_core::encoder::{InitStrategy, MergeEncoder};
use ktm_core::model::{LoraConfig, LoraSet, ModelConfig, ModelParams};
use ktm_core::params::ParamStore;

pub struct Fixture {
    pub store: ParamStore<f32>,
    pub model: ModelParams,
    pub lora: LoraSet,
    pub encoder: MergeEncoder,
    pub tokenizer: Tokenizer,
}

/// Desk-scale model with a K-way merge encoder, untrained weights.
pub fn fixture(k: usize) -> Fixture {
    let tokenizer = Tokenizer::new();
    let cfg = ModelConfig::desk(tokenizer.vocab_size());
    let mut store = ParamStore::new();
    let model = ModelParams::init(&mut store, &cfg, 0).expect("valid desk config");
    let lora = LoraSet::init(&mut store, &cfg, &LoraConfig::default(), 1);
    let encoder = MergeEncoder::init(&mut store, k, cfg.embed_dim, InitStrategy::Average, 2).expect("valid K");
    Fixture { store, model, lora, encoder, tokenizer }
}

/// A representative prompt: a rendered tree plus its query.
pub fn sample_prompt(n_nodes: usize) -> String {
    ktm_core::data::gen_tree(n_nodes, 7).expect("valid node count").prompt()
}
