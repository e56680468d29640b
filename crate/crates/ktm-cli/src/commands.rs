//! Subcommand implementations.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ktm_core::data::{self, SampleMeta, SampleRecord, Tokenizer};
use ktm_core::encoder::KGramCache;
use ktm_core::infer::{self, DecodeMode, GenerationConfig};
use ktm_core::metrics::{self, EvalReport};
use ktm_core::train::{TrainError, Trainer};

use crate::ckpt::{self, Snapshot};
use crate::config::RunConfig;
use crate::CliError;

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::load(p).map_err(CliError::Config),
        None => RunConfig::parse("").map_err(CliError::Config),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn gen_data(
    config: Option<&Path>,
    out: &Path,
    samples: Option<usize>,
    n_nodes: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = samples {
        cfg.data.n_samples = s;
    }
    if let Some(n) = n_nodes {
        cfg.data.n_nodes = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }

    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.data.seed);
    let mut lines = String::new();
    let mut positives = 0usize;
    let mut token_total = 0usize;
    for _ in 0..cfg.data.n_samples {
        let tree = data::gen_tree(cfg.data.n_nodes, rng.gen()).map_err(|e| CliError::Config(e.to_string()))?;
        if tree.label {
            positives += 1;
        }
        let prompt = tree.prompt();
        token_total += tok.encode(&prompt).0.len();
        let record = SampleRecord {
            prompt,
            completion: tree.completion().to_string(),
            meta: SampleMeta { task: cfg.data.task.clone(), seed: cfg.data.seed },
        };
        lines.push_str(&serde_json::to_string(&record).expect("record serializes"));
        lines.push('\n');
    }
    write_file(out, lines.as_bytes())?;
    println!(
        "wrote {} samples to {} (label balance {:.3}, mean prompt tokens {:.1})",
        cfg.data.n_samples,
        out.display(),
        positives as f64 / cfg.data.n_samples.max(1) as f64,
        token_total as f64 / cfg.data.n_samples.max(1) as f64,
    );
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } | TrainError::Stalled { .. } => CliError::Diverged(e.to_string()),
        other => CliError::Config(other.to_string()),
    }
}

struct SeedOutcome {
    seed: u64,
    best_accuracy: f64,
    converged: bool,
    epochs: usize,
}

/// Train one seed from a given curriculum position, checkpointing at every
/// epoch boundary. Log rows are appended to `csv` and flushed to `csv_path`
/// each epoch so a killed run keeps its history.
#[allow(clippy::too_many_arguments)]
fn train_seed(
    cfg: &RunConfig,
    mut trainer: Trainer<f32>,
    seed: u64,
    start_stage: usize,
    start_epoch: usize,
    ckpt_path: &Path,
    csv_path: &Path,
    csv: &mut String,
) -> Result<SeedOutcome, CliError> {
    let schedule = cfg.schedule();
    let mut best = 0.0f64;
    let mut epochs_done = 0usize;
    let last_stage = schedule.stages.len() - 1;
    for (stage, st) in schedule.stages.iter().enumerate().skip(start_stage) {
        let first = if stage == start_stage { start_epoch } else { 0 };
        let mut advanced = false;
        for epoch in first..schedule.max_epochs_per_stage {
            let loss = trainer.train_epoch(st.n_nodes, stage, epoch).map_err(train_error)?;
            let acc = trainer.val_accuracy(st.n_nodes).map_err(train_error)?;
            // seeds are ranked by what they achieve on the final stage's data
            if stage == last_stage {
                best = best.max(acc);
            }
            epochs_done += 1;
            csv.push_str(&format!(
                "{},{},{},{:.6},{:.4},{}\n",
                trainer.global_step, epoch, stage, loss, acc, seed
            ));
            write_file(csv_path, csv.as_bytes())?;
            let snap = Snapshot {
                run: cfg.clone(),
                seed,
                global_step: trainer.global_step,
                opt_step: trainer.opt.step,
                stage,
                epochs_in_stage: epoch + 1,
            };
            ckpt::save_trainer(ckpt_path, &trainer, &snap).map_err(|e| CliError::Io(e.to_string()))?;
            if acc >= st.threshold {
                advanced = true;
                break;
            }
        }
        if !advanced {
            return Ok(SeedOutcome { seed, best_accuracy: best, converged: false, epochs: epochs_done });
        }
    }
    Ok(SeedOutcome { seed, best_accuracy: best, converged: true, epochs: epochs_done })
}

pub fn train(
    config: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Io(format!("creating {}: {e}", out_dir.display())))?;

    let mut outcomes = Vec::new();
    if let Some(resume_path) = resume {
        let (trainer, snap) = ckpt::load_trainer(resume_path).map_err(CliError::Config)?;
        let mut cfg = snap.run.clone();
        if let Some(e) = epochs_override {
            cfg.train.max_epochs_per_stage = e;
        }
        let seed = snap.seed;
        let ckpt_path = out_dir.join(format!("ckpt_seed{seed}.ktm1"));
        let csv_path = out_dir.join(format!("train_seed{seed}.csv"));
        let mut csv = String::from("step,epoch,stage,loss,val_accuracy,seed\n");
        // a checkpoint written after reaching a stage threshold resumes at
        // the next stage
        let (stage, epoch) = next_position(&cfg, &snap);
        let outcome = train_seed(&cfg, trainer, seed, stage, epoch, &ckpt_path, &csv_path, &mut csv)?;
        outcomes.push(outcome);
        finish(out_dir, &outcomes)
    } else {
        let mut cfg = load_config(config)?;
        if let Some(s) = seed_override {
            cfg.train.seeds = vec![s];
        }
        if let Some(e) = epochs_override {
            cfg.train.max_epochs_per_stage = e;
        }
        for &seed in &cfg.train.seeds.clone() {
            let trainer: Trainer<f32> = Trainer::new(
                &cfg.model_config(),
                &cfg.lora_config(),
                cfg.merge.k,
                cfg.merge.init,
                cfg.train_config(seed),
            )
            .map_err(train_error)?;
            let ckpt_path = out_dir.join(format!("ckpt_seed{seed}.ktm1"));
            let csv_path = out_dir.join(format!("train_seed{seed}.csv"));
            let mut csv = String::from("step,epoch,stage,loss,val_accuracy,seed\n");
            let outcome = train_seed(&cfg, trainer, seed, 0, 0, &ckpt_path, &csv_path, &mut csv)?;
            println!(
                "seed {seed}: best accuracy {:.4} over {} epochs ({})",
                outcome.best_accuracy,
                outcome.epochs,
                if outcome.converged { "converged" } else { "stalled" }
            );
            outcomes.push(outcome);
        }
        finish(out_dir, &outcomes)
    }
}

fn next_position(cfg: &RunConfig, snap: &Snapshot) -> (usize, usize) {
    let threshold = cfg.train.stages[snap.stage].threshold;
    let _ = threshold;
    if snap.epochs_in_stage >= cfg.train.max_epochs_per_stage {
        (snap.stage + 1, 0)
    } else {
        (snap.stage, snap.epochs_in_stage)
    }
}

fn finish(out_dir: &Path, outcomes: &[SeedOutcome]) -> Result<(), CliError> {
    let best = outcomes
        .iter()
        .max_by(|a, b| a.best_accuracy.partial_cmp(&b.best_accuracy).unwrap())
        .expect("at least one seed");
    let summary = serde_json::json!({
        "seeds": outcomes.iter().map(|o| serde_json::json!({
            "seed": o.seed,
            "best_accuracy": o.best_accuracy,
            "converged": o.converged,
            "epochs": o.epochs,
        })).collect::<Vec<_>>(),
        "best_seed": best.seed,
        "best_accuracy": best.best_accuracy,
    });
    write_file(&out_dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
    let src = out_dir.join(format!("ckpt_seed{}.ktm1", best.seed));
    let dst = out_dir.join("best.ktm1");
    std::fs::copy(&src, &dst).map_err(|e| CliError::Io(format!("copying best checkpoint: {e}")))?;
    println!("best seed {} (accuracy {:.4})", best.seed, best.best_accuracy);
    if outcomes.iter().all(|o| !o.converged) {
        return Err(CliError::Diverged(format!(
            "no seed reached its curriculum thresholds (best accuracy {:.4})",
            best.best_accuracy
        )));
    }
    Ok(())
}

pub fn eval(
    checkpoint: &Path,
    k: Option<usize>,
    samples: Option<usize>,
    out: Option<&Path>,
    csv: bool,
) -> Result<(), CliError> {
    let (trainer, snap) = ckpt::load_trainer(checkpoint).map_err(CliError::Config)?;
    if let Some(want) = k {
        if want != snap.run.merge.k {
            return Err(CliError::Config(format!(
                "checkpoint was trained with K={}, but K={want} was requested",
                snap.run.merge.k
            )));
        }
    }
    let n_samples = samples.unwrap_or(snap.run.eval.samples).max(1);
    let n_nodes = snap.run.data.n_nodes;
    let labels = snap.run.eval.label_tokens.clone();
    let tok = Tokenizer::new();
    let mut cache: KGramCache<f32> = KGramCache::new(4096, trainer.encoder.version);

    let mut rng = ChaCha8Rng::seed_from_u64(snap.run.data.seed ^ 0x00e5_a1de);
    let mut correct = 0usize;
    let mut tokens_original = 0usize;
    let mut tokens_compressed = 0usize;
    for _ in 0..n_samples {
        let tree = data::gen_tree(n_nodes, rng.gen()).map_err(|e| CliError::Config(e.to_string()))?;
        let (tokens, _) = tok.encode(&tree.prompt());
        let seq = infer::prefill(&trainer.encoder, &trainer.store, &trainer.model, &tokens, data::PAD_ID, Some(&mut cache))
            .map_err(|e| CliError::Config(e.to_string()))?;
        let pred = infer::classify(&seq, &trainer.store, &trainer.model, Some(&trainer.lora), &labels)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let gold = if tree.label { data::LABEL_TRUE_ID } else { data::LABEL_FALSE_ID };
        if pred == gold {
            correct += 1;
        }
        tokens_original += tokens.len();
        tokens_compressed += seq.len();
    }

    let accuracy = correct as f64 / n_samples as f64;
    let length_reduction = metrics::length_reduction(tokens_original, tokens_compressed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let pl_f1 = metrics::pl_f1(accuracy, length_reduction).map_err(|e| CliError::Config(e.to_string()))?;
    let report = EvalReport {
        method: format!("{}-token", snap.run.merge.k),
        performance: accuracy,
        length_reduction,
        pl_f1,
        raw_metric: accuracy,
        flop_ratio: metrics::flop_ratio(snap.run.merge.k, tokens_compressed / n_samples, 1),
        samples: n_samples,
        tokens_original,
        tokens_compressed,
    };
    let rendered = if csv {
        format!("{}\n{}\n", EvalReport::csv_header(), report.csv_row())
    } else {
        serde_json::to_string_pretty(&report).unwrap() + "\n"
    };
    print!("{rendered}");
    if let Some(path) = out {
        write_file(path, (serde_json::to_string_pretty(&report).unwrap() + "\n").as_bytes())?;
    }
    Ok(())
}

pub fn generate(
    checkpoint: &Path,
    prompt: &str,
    max_new_tokens: usize,
    temperature: Option<f64>,
    seed: u64,
    trace: Option<&Path>,
) -> Result<(), CliError> {
    if prompt.is_empty() {
        return Err(CliError::Config("prompt must be nonempty".into()));
    }
    let (trainer, _snap) = ckpt::load_trainer(checkpoint).map_err(CliError::Config)?;
    let tok = Tokenizer::new();
    let (tokens, warnings) = tok.encode(prompt);
    if warnings > 0 {
        eprintln!("warning: {warnings} characters outside the alphabet were replaced");
    }
    let mut seq = infer::prefill(&trainer.encoder, &trainer.store, &trainer.model, &tokens, data::PAD_ID, None)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let gen_cfg = GenerationConfig {
        max_new_tokens,
        mode: if temperature.is_some() { DecodeMode::Temperature } else { DecodeMode::Greedy },
        temperature: temperature.unwrap_or(1.0),
        stop_token: Some(data::STOP_ID),
        seed,
    };
    let out_tokens = infer::generate(&mut seq, &trainer.store, &trainer.model, Some(&trainer.lora), &gen_cfg)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut stdout = std::io::stdout();
    writeln!(stdout, "{}", tok.decode(&out_tokens)).map_err(|e| CliError::Io(e.to_string()))?;

    if let Some(path) = trace {
        let slots: Vec<serde_json::Value> = seq
            .slots()
            .iter()
            .map(|s| match s {
                infer::Slot::Compressed { source_block, .. } => {
                    serde_json::json!({"kind": "compressed", "source_block": source_block})
                }
                infer::Slot::Original { token, .. } => serde_json::json!({"kind": "original", "token": token}),
            })
            .collect();
        let trace_json = serde_json::json!({
            "prompt_tokens": tokens,
            "slots": slots,
            "generated_tokens": out_tokens,
        });
        write_file(path, serde_json::to_string_pretty(&trace_json).unwrap().as_bytes())?;
    }
    Ok(())
}

pub fn report(inputs: &[std::path::PathBuf], baselines: Option<&Path>) -> Result<(), CliError> {
    let mut entries: Vec<(String, f64, f64)> = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: not an evaluation report: {e}", path.display())))?;
        entries.push((r.method, r.performance, r.length_reduction));
    }
    if let Some(path) = baselines {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("method") {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(CliError::Config(format!("{}: line {}: expected method,performance,length_reduction", path.display(), i + 1)));
            }
            let p: f64 = parts[1].trim().parse().map_err(|_| CliError::Config(format!("bad performance on line {}", i + 1)))?;
            let l: f64 = parts[2].trim().parse().map_err(|_| CliError::Config(format!("bad length_reduction on line {}", i + 1)))?;
            entries.push((parts[0].trim().to_string(), p, l));
        }
    }
    let rows = metrics::pareto_table(&entries).map_err(|e| CliError::Config(e.to_string()))?;
    println!("{:<20} {:>8} {:>8} {:>8}  pareto", "method", "P", "L", "F1");
    for row in rows {
        println!(
            "{:<20} {:>8.4} {:>8.4} {:>8.4}  {}",
            row.method,
            row.performance,
            row.length_reduction,
            row.pl_f1,
            if row.pareto_optimal { "*" } else { "" }
        );
    }
    Ok(())
}
