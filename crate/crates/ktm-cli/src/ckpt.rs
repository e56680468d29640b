//! Trainer persistence on top of the KTM1 container: model weights, adapter
//! and encoder weights, optimizer moments, and a JSON run snapshot in the
//! config slot.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ktm_core::checkpoint::{self, CheckpointError, NamedTensor};
use ktm_core::encoder::MergeEncoder;
use ktm_core::model::{apply_trainable, trainable_parameters, LoraSet, ModelParams};
use ktm_core::params::ParamStore;
use ktm_core::tensor::ParamId;
use ktm_core::train::{AdamW, Trainer};

use crate::config::RunConfig;

/// Everything not captured by the tensors themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub run: RunConfig,
    pub seed: u64,
    pub global_step: u64,
    pub opt_step: u64,
    /// Curriculum position for resume: (stage index, epochs finished there).
    pub stage: usize,
    pub epochs_in_stage: usize,
}

const M_PREFIX: &str = "opt.m.";
const V_PREFIX: &str = "opt.v.";

pub fn save_trainer(path: &Path, trainer: &Trainer<f32>, snap: &Snapshot) -> Result<(), CheckpointError> {
    let mut tensors = checkpoint::store_tensors(&trainer.store);
    let (m, v) = trainer.opt.moments();
    // moment tensors follow the weights, in parameter order, so repeated
    // save/load/save cycles are byte-identical
    let mut with_moments: Vec<(ParamId, &HashMap<ParamId, Vec<f32>>, &str)> = Vec::new();
    for (prefix, map) in [(M_PREFIX, m), (V_PREFIX, v)] {
        let mut ids: Vec<ParamId> = map.keys().copied().collect();
        ids.sort();
        for id in ids {
            with_moments.push((id, map, prefix));
        }
    }
    for (id, map, prefix) in with_moments {
        let e = trainer.store.entry(id);
        tensors.push(NamedTensor {
            name: format!("{prefix}{}", e.name),
            rows: e.rows,
            cols: e.cols,
            data: map[&id].clone(),
        });
    }
    let config = serde_json::to_string(snap).expect("snapshot serializes");
    checkpoint::save(path, &config, &tensors)
}

pub fn load_trainer(path: &Path) -> Result<(Trainer<f32>, Snapshot), String> {
    let (config, tensors) = checkpoint::load::<f32>(path).map_err(|e| e.to_string())?;
    let snap: Snapshot = serde_json::from_str(&config).map_err(|e| format!("bad snapshot: {e}"))?;
    snap.run.validate()?;

    let mut store: ParamStore<f32> = ParamStore::new();
    let mut m_raw: Vec<(String, Vec<f32>)> = Vec::new();
    let mut v_raw: Vec<(String, Vec<f32>)> = Vec::new();
    for t in tensors {
        if let Some(name) = t.name.strip_prefix(M_PREFIX) {
            m_raw.push((name.to_string(), t.data));
        } else if let Some(name) = t.name.strip_prefix(V_PREFIX) {
            v_raw.push((name.to_string(), t.data));
        } else {
            store.add(&t.name, t.data, t.rows, t.cols, false);
        }
    }

    let model_cfg = snap.run.model_config();
    let model = ModelParams::from_store(&store, &model_cfg).map_err(|e| e.to_string())?;
    let lora = LoraSet::from_store(&store, &model_cfg, &snap.run.lora_config()).map_err(|e| e.to_string())?;
    let encoder = MergeEncoder::from_store(&store, snap.run.merge.k, model_cfg.embed_dim).map_err(|e| e.to_string())?;
    let ids = trainable_parameters(&store, &lora, &encoder.param_ids(), snap.run.train.full_finetune);
    apply_trainable(&mut store, &ids);

    let train_cfg = snap.run.train_config(snap.seed);
    let mut opt = AdamW::new(train_cfg.lr, train_cfg.weight_decay);
    let lookup = |raw: Vec<(String, Vec<f32>)>| -> Result<HashMap<ParamId, Vec<f32>>, String> {
        raw.into_iter()
            .map(|(name, data)| {
                store
                    .lookup(&name)
                    .map(|id| (id, data))
                    .ok_or_else(|| format!("moment tensor for unknown parameter {name}"))
            })
            .collect()
    };
    opt.restore_moments(lookup(m_raw)?, lookup(v_raw)?, snap.opt_step);

    let trainer = Trainer::from_parts(store, model, lora, encoder, opt, train_cfg, snap.global_step);
    Ok((trainer, snap))
}
