//! Masked NLL training of LoRA adapters and the merge encoder jointly:
//! AdamW, per-sample loss graphs, the staged curriculum, and the encoder
//! initialization ablation harness.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Tokenizer};
use crate::encoder::{compress_prefix_graph, EncoderError, InitStrategy, MergeEncoder};
use crate::infer;
use crate::model::{
    apply_trainable, trainable_parameters, Forward, LoraConfig, LoraSet, ModelConfig, ModelError,
    ModelParams,
};
use crate::params::ParamStore;
use crate::tensor::{lit, Graph, NodeId, ParamId, Scalar, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: u64 },
    #[error("curriculum stalled in stage {stage} after {epochs} epochs: best accuracy {best_accuracy:.4} < threshold {threshold:.4}")]
    Stalled { stage: usize, epochs: usize, best_accuracy: f64, threshold: f64 },
    #[error("curriculum schedule must have at least one stage")]
    EmptySchedule,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

/// One training sample: a prompt to be compressed plus the target tokens
/// (uncompressed positions) evaluated by the loss.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub prompt_tokens: Vec<usize>,
    pub target_tokens: Vec<usize>,
}

/// Masked NLL: `-sum_{t in U} log p(target_t)` with zero contribution and
/// exactly zero gradient at `None` positions.
pub fn masked_nll<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    targets: &[Option<usize>],
) -> Result<NodeId, TensorError> {
    let logp = g.log_softmax_rows(logits)?;
    g.nll_masked(logp, targets)
}

/// Build the loss graph for one sample: compressed prefix slots, then the
/// target tokens' own embeddings, with the loss restricted to target positions.
pub fn sample_loss<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    model: &ModelParams,
    lora: Option<&LoraSet>,
    encoder: &MergeEncoder,
    sample: &TrainSample,
    pad_token: usize,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<NodeId, TrainError> {
    let m = sample.target_tokens.len();
    assert!(m >= 1, "sample must have at least one target token");
    let mut rows: Vec<NodeId> = Vec::new();
    let n = if sample.prompt_tokens.is_empty() {
        0
    } else {
        let compressed = compress_prefix_graph(g, encoder, store, model, &sample.prompt_tokens, pad_token)?;
        let n = compressed.len();
        rows.extend(compressed);
        n
    };
    // inputs stop before the final target; each position predicts the next slot
    if m > 1 {
        let emb = store.node(g, model.emb);
        rows.push(g.gather_rows(emb, &sample.target_tokens[..m - 1])?);
    }
    let inputs = g.concat_rows(&rows)?;
    let mut fwd = Forward::new(store, model, lora);
    if train_mode {
        fwd = fwd.train(dropout_seed);
    }
    let logits = fwd.forward_lm(g, inputs)?;
    let total = n + m - 1;
    let mut targets: Vec<Option<usize>> = vec![None; total];
    if n > 0 {
        // position n-1 (last compressed slot) predicts the first target
        for (j, &t) in sample.target_tokens.iter().enumerate() {
            targets[n - 1 + j] = Some(t);
        }
    } else {
        // no compressed prefix: first target is context, the rest are scored
        for (j, &t) in sample.target_tokens.iter().enumerate().skip(1) {
            targets[j - 1] = Some(t);
        }
    }
    Ok(masked_nll(g, logits, &targets)?)
}

/// AdamW with decoupled weight decay. Moment buffers are keyed by parameter.
#[derive(Debug, Clone)]
pub struct AdamW<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clip; infinite disables it.
    pub clip_norm: f64,
    pub step: u64,
    m: HashMap<ParamId, Vec<S>>,
    v: HashMap<ParamId, Vec<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            clip_norm: 1.0,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn moments(&self) -> (&HashMap<ParamId, Vec<S>>, &HashMap<ParamId, Vec<S>>) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: HashMap<ParamId, Vec<S>>, v: HashMap<ParamId, Vec<S>>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }

    /// Apply one update from accumulated gradients; only params present in
    /// `grads` change.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &HashMap<ParamId, Vec<S>>) {
        self.step += 1;
        // scale all gradients together when their global norm exceeds the clip
        let mut sq = 0.0f64;
        for g in grads.values() {
            for &x in g {
                let x = x.to_f64().unwrap_or(0.0);
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > self.clip_norm { lit::<S>(self.clip_norm / norm) } else { S::one() };
        let b1 = lit::<S>(self.beta1);
        let b2 = lit::<S>(self.beta2);
        let one = S::one();
        let bc1 = lit::<S>(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = lit::<S>(1.0 - self.beta2.powi(self.step as i32));
        let lr = lit::<S>(self.lr);
        let eps = lit::<S>(self.eps);
        let wd = lit::<S>(self.weight_decay);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads[&id];
            let m = self.m.entry(id).or_insert_with(|| vec![S::zero(); g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![S::zero(); g.len()]);
            let p = store.data_mut(id);
            for i in 0..g.len() {
                let gi = clip * g[i];
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] = p[i] - lr * (mhat / (vhat.sqrt() + eps) + wd * p[i]);
            }
        }
    }
}

/// One optimizer step over a batch. Loss graphs run per sample; gradients are
/// averaged over the batch in sample order (deterministic), and the reported
/// loss is the pre-update batch mean of per-sample sums.
#[allow(clippy::too_many_arguments)]
pub fn train_step<S: Scalar>(
    store: &mut ParamStore<S>,
    model: &ModelParams,
    lora: Option<&LoraSet>,
    encoder: &mut MergeEncoder,
    batch: &[TrainSample],
    opt: &mut AdamW<S>,
    pad_token: usize,
    step_index: u64,
    dropout_base_seed: u64,
) -> Result<f64, TrainError> {
    assert!(!batch.is_empty(), "empty batch");
    let inv_b = lit::<S>(1.0 / batch.len() as f64);
    let mut grads: HashMap<ParamId, Vec<S>> = HashMap::new();
    let mut loss_sum = 0.0;
    for (i, sample) in batch.iter().enumerate() {
        let mut g: Graph<S> = Graph::new();
        let seed = splitmix(dropout_base_seed, step_index, i as u64);
        // non-finite activations anywhere in the forward pass count as divergence
        let loss = sample_loss(&mut g, store, model, lora, encoder, sample, pad_token, true, seed)
            .map_err(|e| match e {
                TrainError::Tensor(TensorError::NonFinite { .. })
                | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
                | TrainError::Encoder(EncoderError::Tensor(TensorError::NonFinite { .. })) => {
                    TrainError::Diverged { step: step_index }
                }
                other => other,
            })?;
        let raw = g.data(loss)[0].to_f64().unwrap_or(f64::NAN);
        if !raw.is_finite() {
            return Err(TrainError::Diverged { step: step_index });
        }
        loss_sum += raw;
        let scaled = g.scale(loss, inv_b);
        g.backward(scaled)?;
        for &(pid, node) in g.param_leaves().to_vec().iter() {
            if let Some(grad) = g.grad(node) {
                let acc = grads.entry(pid).or_insert_with(|| vec![S::zero(); grad.len()]);
                for (a, &gv) in acc.iter_mut().zip(grad) {
                    *a = *a + gv;
                }
            }
        }
    }
    opt.update(store, &grads);
    encoder.bump_version();
    Ok(loss_sum / batch.len() as f64)
}

fn splitmix(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(b.wrapping_mul(0xbf58476d1ce4e5b9))
        .wrapping_add(c.wrapping_mul(0x94d049bb133111eb));
    z ^= z >> 30;
    z = z.wrapping_mul(0xbf58476d1ce4e5b9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurriculumStage {
    pub n_nodes: usize,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurriculumSchedule {
    pub stages: Vec<CurriculumStage>,
    pub max_epochs_per_stage: usize,
}

impl CurriculumSchedule {
    pub fn single(n_nodes: usize, threshold: f64, max_epochs: usize) -> Self {
        CurriculumSchedule {
            stages: vec![CurriculumStage { n_nodes, threshold }],
            max_epochs_per_stage: max_epochs,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.stages.is_empty() {
            return Err(TrainError::EmptySchedule);
        }
        Ok(())
    }
}

/// One row of the training log CSV.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub stage: usize,
    pub loss: f64,
    pub val_accuracy: f64,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub stage_transitions: Vec<(usize, usize)>, // (stage reached, at epoch index)
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,stage,loss,val_accuracy,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.4},{}\n",
                r.step, r.epoch, r.stage, r.loss, r.val_accuracy, r.seed
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_samples_per_epoch: usize,
    pub val_samples: usize,
    pub full_finetune: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
            train_samples_per_epoch: 512,
            val_samples: 256,
            full_finetune: false,
            seed: 0,
        }
    }
}

/// A full training context for the tree-classification task: model, adapters,
/// encoder, optimizer, and deterministic data streams.
pub struct Trainer<S: Scalar> {
    pub store: ParamStore<S>,
    pub model: ModelParams,
    pub lora: LoraSet,
    pub encoder: MergeEncoder,
    pub opt: AdamW<S>,
    pub tokenizer: Tokenizer,
    pub config: TrainConfig,
    pub global_step: u64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        model_cfg: &ModelConfig,
        lora_cfg: &LoraConfig,
        k: usize,
        init: InitStrategy,
        config: TrainConfig,
    ) -> Result<Self, TrainError> {
        let tokenizer = Tokenizer::new();
        let mut store: ParamStore<S> = ParamStore::new();
        let model = ModelParams::init(&mut store, model_cfg, config.seed)?;
        let lora = LoraSet::init(&mut store, model_cfg, lora_cfg, config.seed.wrapping_add(1));
        let encoder = MergeEncoder::init(&mut store, k, model_cfg.embed_dim, init, config.seed.wrapping_add(2))?;
        let ids = trainable_parameters(&store, &lora, &encoder.param_ids(), config.full_finetune);
        apply_trainable(&mut store, &ids);
        let opt = AdamW::new(config.lr, config.weight_decay);
        Ok(Trainer { store, model, lora, encoder, opt, tokenizer, config, global_step: 0 })
    }

    /// Reassemble a trainer from parts restored out of a checkpoint.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        store: ParamStore<S>,
        model: ModelParams,
        lora: LoraSet,
        encoder: MergeEncoder,
        opt: AdamW<S>,
        config: TrainConfig,
        global_step: u64,
    ) -> Self {
        Trainer { store, model, lora, encoder, opt, tokenizer: Tokenizer::new(), config, global_step }
    }

    /// Deterministic tree sample for a (stage, epoch, index) coordinate.
    pub fn tree_sample(&self, n_nodes: usize, stage: usize, epoch: usize, idx: usize) -> TrainSample {
        let seed = splitmix(self.config.seed, (stage as u64) << 32 | epoch as u64, idx as u64);
        let tree = data::gen_tree(n_nodes, seed).expect("n_nodes in range");
        let (prompt_tokens, _) = self.tokenizer.encode(&tree.prompt());
        let label = if tree.label { data::LABEL_TRUE_ID } else { data::LABEL_FALSE_ID };
        TrainSample { prompt_tokens, target_tokens: vec![label, data::STOP_ID] }
    }

    fn val_tree(&self, n_nodes: usize, idx: usize) -> data::TreeSample {
        let seed = splitmix(self.config.seed ^ VAL_SALT, n_nodes as u64, idx as u64);
        data::gen_tree(n_nodes, seed).expect("n_nodes in range")
    }

    /// Held-out classification accuracy on `val_samples` fresh trees.
    pub fn val_accuracy(&self, n_nodes: usize) -> Result<f64, TrainError> {
        let labels = [data::LABEL_TRUE_ID, data::LABEL_FALSE_ID];
        let mut correct = 0usize;
        for idx in 0..self.config.val_samples {
            let tree = self.val_tree(n_nodes, idx);
            let (tokens, _) = self.tokenizer.encode(&tree.prompt());
            let seq = infer::prefill(&self.encoder, &self.store, &self.model, &tokens, data::PAD_ID, None)
                .map_err(|e| match e {
                    infer::InferError::Encoder(e) => TrainError::Encoder(e),
                    infer::InferError::Model(e) => TrainError::Model(e),
                    infer::InferError::Tensor(e) => TrainError::Tensor(e),
                    other => TrainError::Model(ModelError::Config(other.to_string())),
                })?;
            let pred = infer::classify(&seq, &self.store, &self.model, Some(&self.lora), &labels)
                .map_err(|e| TrainError::Model(ModelError::Config(e.to_string())))?;
            let gold = if tree.label { data::LABEL_TRUE_ID } else { data::LABEL_FALSE_ID };
            if pred == gold {
                correct += 1;
            }
        }
        Ok(correct as f64 / self.config.val_samples as f64)
    }

    /// One epoch of training on `n_nodes`-node trees; returns mean loss.
    pub fn train_epoch(&mut self, n_nodes: usize, stage: usize, epoch: usize) -> Result<f64, TrainError> {
        let n_steps = self.config.train_samples_per_epoch / self.config.batch_size;
        let mut loss_acc = 0.0;
        for s in 0..n_steps {
            let batch: Vec<TrainSample> = (0..self.config.batch_size)
                .map(|i| self.tree_sample(n_nodes, stage, epoch, s * self.config.batch_size + i))
                .collect();
            let lora = Some(&self.lora);
            let loss = train_step(
                &mut self.store,
                &self.model,
                lora,
                &mut self.encoder,
                &batch,
                &mut self.opt,
                data::PAD_ID,
                self.global_step,
                self.config.seed,
            )?;
            loss_acc += loss;
            self.global_step += 1;
        }
        Ok(loss_acc / n_steps.max(1) as f64)
    }

    /// Run the staged curriculum: advance to the next stage only once the
    /// validation accuracy meets the stage threshold.
    pub fn run_curriculum(&mut self, schedule: &CurriculumSchedule) -> Result<TrainLog, TrainError> {
        schedule.validate()?;
        let mut log = TrainLog::default();
        let mut epoch_counter = 0usize;
        for (stage, st) in schedule.stages.iter().enumerate() {
            let mut best = 0.0f64;
            let mut advanced = false;
            for e in 0..schedule.max_epochs_per_stage {
                let loss = self.train_epoch(st.n_nodes, stage, e)?;
                let acc = self.val_accuracy(st.n_nodes)?;
                best = best.max(acc);
                log.rows.push(LogRow {
                    step: self.global_step,
                    epoch: epoch_counter,
                    stage,
                    loss,
                    val_accuracy: acc,
                    seed: self.config.seed,
                });
                epoch_counter += 1;
                if acc >= st.threshold {
                    log.stage_transitions.push((stage + 1, epoch_counter));
                    advanced = true;
                    break;
                }
            }
            if !advanced {
                return Err(TrainError::Stalled {
                    stage,
                    epochs: schedule.max_epochs_per_stage,
                    best_accuracy: best,
                    threshold: st.threshold,
                });
            }
        }
        Ok(log)
    }
}

const VAL_SALT: u64 = 0x7a31_5eed_c0ff_ee01;

#[derive(Debug, Clone, Serialize)]
pub struct AblationTrial {
    pub seed: u64,
    pub strategy: InitStrategy,
    /// First epoch (1-based) where validation accuracy reached the threshold,
    /// or the epoch budget if never reached.
    pub epochs_to_threshold: usize,
    pub reached: bool,
}

/// Initialization ablation: epochs until the final stage's accuracy threshold
/// under a given curriculum, for one encoder init strategy, one trial per
/// seed. Epochs are counted across all stages; a pre-final stage that
/// exhausts its budget moves on anyway so trials stay comparable.
#[allow(clippy::too_many_arguments)]
pub fn ablation_init<S: Scalar>(
    model_cfg: &ModelConfig,
    lora_cfg: &LoraConfig,
    k: usize,
    strategy: InitStrategy,
    seeds: &[u64],
    base_config: &TrainConfig,
    schedule: &CurriculumSchedule,
) -> Result<Vec<AblationTrial>, TrainError> {
    schedule.validate()?;
    let last = schedule.stages.len() - 1;
    let mut trials = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base_config.clone();
        cfg.seed = seed;
        let mut trainer: Trainer<S> = Trainer::new(model_cfg, lora_cfg, k, strategy, cfg)?;
        let mut reached = false;
        let mut epochs = 0usize;
        'stages: for (stage, st) in schedule.stages.iter().enumerate() {
            for e in 0..schedule.max_epochs_per_stage {
                trainer.train_epoch(st.n_nodes, stage, e)?;
                epochs += 1;
                let acc = trainer.val_accuracy(st.n_nodes)?;
                if acc >= st.threshold {
                    if stage == last {
                        reached = true;
                        break 'stages;
                    }
                    continue 'stages;
                }
            }
        }
        trials.push(AblationTrial { seed, strategy, epochs_to_threshold: epochs, reached });
    }
    Ok(trials)
}
