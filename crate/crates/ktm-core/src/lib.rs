//! K-token merging: compress every contiguous block of K token embeddings
//! into one latent embedding via a learned average-initialized encoder, feed
//! the compressed prefix to a LoRA-adapted decoder-only transformer, and
//! generate in the original vocabulary.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use encoder::{BlockPartition, InitStrategy, KGramCache, MergeEncoder};
pub use infer::{DecodeMode, GenerationConfig, MixedSequence};
pub use metrics::EvalReport;
pub use model::{LoraConfig, LoraSet, ModelConfig, ModelParams};
pub use params::ParamStore;
pub use tensor::{Graph, NodeId, ParamId, Scalar};
