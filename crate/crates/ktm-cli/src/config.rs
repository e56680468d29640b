//! Run configuration: a TOML file with model / merge / train / data / eval
//! sections. Unknown keys are rejected with the offending key name; the
//! KTM_SEED environment variable overrides the configured seed.

use serde::{Deserialize, Serialize};

use ktm_core::data::Tokenizer;
use ktm_core::encoder::InitStrategy;
use ktm_core::model::{LoraConfig, ModelConfig};
use ktm_core::train::{CurriculumSchedule, CurriculumStage, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub merge: MergeSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        ModelSection {
            embed_dim: d.embed_dim,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            max_seq_len: d.max_seq_len,
            dropout: d.dropout_p,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub k: usize,
    pub init: InitStrategy,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for MergeSection {
    fn default() -> Self {
        let l = LoraConfig::default();
        MergeSection { k: 4, init: InitStrategy::Average, lora_rank: l.rank, lora_alpha: l.alpha, lora_dropout: l.dropout_p }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_samples_per_epoch: usize,
    pub val_samples: usize,
    pub max_epochs_per_stage: usize,
    pub seeds: Vec<u64>,
    pub full_finetune: bool,
    pub stages: Vec<StageSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub n_nodes: usize,
    pub threshold: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            train_samples_per_epoch: 512,
            val_samples: 256,
            max_epochs_per_stage: 20,
            seeds: vec![0, 1, 2],
            // the base transformer is trained from scratch here, so the desk
            // default trains it jointly; set false to freeze it and train
            // adapters + encoder only
            full_finetune: true,
            stages: vec![StageSection { n_nodes: 5, threshold: 0.95 }],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub task: String,
    pub n_nodes: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { task: "tree".into(), n_nodes: 5, n_samples: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub metric: String,
    pub label_tokens: Vec<usize>,
    pub samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            metric: "accuracy".into(),
            label_tokens: vec![ktm_core::data::LABEL_TRUE_ID, ktm_core::data::LABEL_FALSE_ID],
            samples: 256,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| format!("config error: {e}"))?;
        if let Ok(v) = std::env::var("KTM_SEED") {
            let seed: u64 = v.parse().map_err(|_| format!("KTM_SEED must be an integer, got {v:?}"))?;
            cfg.train.seeds = vec![seed];
            cfg.data.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.merge.k < 1 {
            return Err("merge.k must be >= 1".into());
        }
        if self.train.seeds.is_empty() {
            return Err("train.seeds must be nonempty".into());
        }
        if self.train.stages.is_empty() {
            return Err("train.stages must be nonempty".into());
        }
        if self.train.batch_size == 0 || self.train.train_samples_per_epoch == 0 {
            return Err("train.batch_size and train.train_samples_per_epoch must be positive".into());
        }
        self.model_config().validate().map_err(|e| e.to_string())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: Tokenizer::new().vocab_size(),
            embed_dim: self.model.embed_dim,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            dropout_p: self.model.dropout,
        }
    }

    pub fn lora_config(&self) -> LoraConfig {
        LoraConfig {
            rank: self.merge.lora_rank,
            alpha: self.merge.lora_alpha,
            dropout_p: self.merge.lora_dropout,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            train_samples_per_epoch: self.train.train_samples_per_epoch,
            val_samples: self.train.val_samples,
            full_finetune: self.train.full_finetune,
            seed,
        }
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule {
            stages: self
                .train
                .stages
                .iter()
                .map(|s| CurriculumStage { n_nodes: s.n_nodes, threshold: s.threshold })
                .collect(),
            max_epochs_per_stage: self.train.max_epochs_per_stage,
        }
    }
}
