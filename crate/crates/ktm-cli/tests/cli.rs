//! End-to-end checks of the `ktm` binary and the persistence layer.

use std::process::Command;

use ktm_cli::ckpt::{self, Snapshot};
use ktm_cli::config::RunConfig;
use ktm_core::train::Trainer;

fn ktm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ktm"))
}

const TINY_TOML: &str = r#"
[model]
embed_dim = 16
n_layers = 1
n_heads = 2
max_seq_len = 24

[merge]
k = 4

[train]
lr = 0.001
batch_size = 4
train_samples_per_epoch = 8
val_samples = 8
seeds = [0]
max_epochs_per_stage = 2
stages = [{ n_nodes = 5, threshold = 0.0 }]
"#;

fn tiny_config() -> RunConfig {
    RunConfig::parse(TINY_TOML).unwrap()
}

fn tiny_trainer(cfg: &RunConfig, seed: u64) -> Trainer<f32> {
    Trainer::new(
        &cfg.model_config(),
        &cfg.lora_config(),
        cfg.merge.k,
        cfg.merge.init,
        cfg.train_config(seed),
    )
    .unwrap()
}

fn snapshot(cfg: &RunConfig, trainer: &Trainer<f32>, seed: u64) -> Snapshot {
    Snapshot {
        run: cfg.clone(),
        seed,
        global_step: trainer.global_step,
        opt_step: trainer.opt.step,
        stage: 0,
        epochs_in_stage: 0,
    }
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let st = ktm()
            .args(["gen-data", "--out"])
            .arg(out)
            .args(["--samples", "50", "--n-nodes", "5", "--seed", "9"])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap(), "same seed must give byte-identical files");
    assert_eq!(bytes_a.iter().filter(|&&c| c == b'\n').count(), 50);

    let report = ktm_core::data::load_jsonl(&a).unwrap();
    assert_eq!(report.records.len(), 50);
    assert!(report.malformed.is_empty());
}

#[test]
fn ktm_seed_env_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let via_env = dir.path().join("env.jsonl");
    let via_flag = dir.path().join("flag.jsonl");
    assert!(ktm()
        .args(["gen-data", "--out"])
        .arg(&via_env)
        .args(["--samples", "10"])
        .env("KTM_SEED", "1234")
        .status()
        .unwrap()
        .success());
    assert!(ktm()
        .args(["gen-data", "--out"])
        .arg(&via_flag)
        .args(["--samples", "10", "--seed", "1234"])
        .status()
        .unwrap()
        .success());
    assert_eq!(std::fs::read(&via_env).unwrap(), std::fs::read(&via_flag).unwrap());
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlerning_rate = 0.1\n").unwrap();
    let out = ktm()
        .args(["train", "--config"])
        .arg(&cfg)
        .args(["--out-dir"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lerning_rate"), "stderr should name the bad key: {stderr}");
}

#[test]
fn missing_dataset_path_is_io_error() {
    let out = ktm()
        .args(["report", "--input", "/nonexistent/report.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn checkpoint_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let mut trainer = tiny_trainer(&cfg, 0);
    trainer.train_epoch(5, 0, 0).unwrap(); // populate optimizer moments
    let p1 = dir.path().join("one.ktm1");
    let p2 = dir.path().join("two.ktm1");
    ckpt::save_trainer(&p1, &trainer, &snapshot(&cfg, &trainer, 0)).unwrap();
    let (loaded, snap) = ckpt::load_trainer(&p1).unwrap();
    ckpt::save_trainer(&p2, &loaded, &snap).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();

    // uninterrupted: two epochs
    let mut full = tiny_trainer(&cfg, 0);
    full.train_epoch(5, 0, 0).unwrap();
    let loss_full = full.train_epoch(5, 0, 1).unwrap();

    // interrupted: one epoch, checkpoint, reload, second epoch
    let mut half = tiny_trainer(&cfg, 0);
    half.train_epoch(5, 0, 0).unwrap();
    let path = dir.path().join("half.ktm1");
    let mut snap = snapshot(&cfg, &half, 0);
    snap.epochs_in_stage = 1;
    ckpt::save_trainer(&path, &half, &snap).unwrap();
    let (mut resumed, _) = ckpt::load_trainer(&path).unwrap();
    let loss_resumed = resumed.train_epoch(5, 0, 1).unwrap();

    let rel = (loss_full - loss_resumed).abs() / loss_full.abs().max(1e-12);
    assert!(rel <= 1e-6, "resume drifted: {loss_full} vs {loss_resumed} (rel {rel:.2e})");
}

#[test]
fn train_command_writes_artifacts_and_eval_consumes_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(&cfg_path, TINY_TOML).unwrap();
    let run_dir = dir.path().join("run");
    let st = ktm()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out-dir")
        .arg(&run_dir)
        .status()
        .unwrap();
    assert!(st.success(), "threshold 0 must converge after one epoch");
    for name in ["ckpt_seed0.ktm1", "train_seed0.csv", "summary.json", "best.ktm1"] {
        assert!(run_dir.join(name).exists(), "missing {name}");
    }
    let csv = std::fs::read_to_string(run_dir.join("train_seed0.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,stage,loss,val_accuracy,seed\n"));
    assert_eq!(csv.lines().count(), 2, "one epoch logged");

    // eval twice: reports must be identical; K mismatch must be exit 2
    let eval = |extra: &[&str]| {
        let mut c = ktm();
        c.args(["eval", "--checkpoint"]).arg(run_dir.join("best.ktm1")).args(["--samples", "8"]).args(extra);
        c.output().unwrap()
    };
    let a = eval(&[]);
    let b = eval(&[]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout, "evaluation must be deterministic");
    let mismatch = eval(&["--k", "2"]);
    assert_eq!(mismatch.status.code(), Some(2));

    // write a report and feed it through the pareto table
    let report_path = dir.path().join("eval.json");
    let st = ktm()
        .args(["eval", "--checkpoint"])
        .arg(run_dir.join("best.ktm1"))
        .args(["--samples", "8", "--out"])
        .arg(&report_path)
        .status()
        .unwrap();
    assert!(st.success());
    let out = ktm().args(["report", "--input"]).arg(&report_path).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("4-token"));
}

#[test]
fn generate_is_deterministic_and_rejects_empty_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let trainer = tiny_trainer(&cfg, 3);
    let path = dir.path().join("fresh.ktm1");
    ckpt::save_trainer(&path, &trainer, &snapshot(&cfg, &trainer, 3)).unwrap();

    let gen = |prompt: &str| {
        ktm()
            .args(["generate", "--checkpoint"])
            .arg(&path)
            .args(["--prompt", prompt, "--max-new-tokens", "8"])
            .output()
            .unwrap()
    };
    let a = gen("n0\n  n1\n\nparent: n0 child: n1?");
    let b = gen("n0\n  n1\n\nparent: n0 child: n1?");
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(gen("").status.code(), Some(2));

    // trace output names every slot
    let trace = dir.path().join("trace.json");
    let st = ktm()
        .args(["generate", "--checkpoint"])
        .arg(&path)
        .args(["--prompt", "n0\n  n1", "--max-new-tokens", "4", "--trace"])
        .arg(&trace)
        .status()
        .unwrap();
    assert!(st.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(v["slots"].as_array().unwrap().iter().any(|s| s["kind"] == "compressed"));
    assert_eq!(v["generated_tokens"].as_array().unwrap().len(), 4);
}

#[test]
fn report_reproduces_published_tree_row_ordering() {
    // accuracy/length pairs from the published 150-node tree comparison;
    // their F1 ordering (4-token > 3-token > 2-token) must reproduce
    let dir = tempfile::tempdir().unwrap();
    let baselines = dir.path().join("rows.csv");
    std::fs::write(
        &baselines,
        "method,performance,length_reduction\n\
         2-token,0.9991,0.50\n\
         3-token,0.9863,0.667\n\
         4-token,0.9838,0.75\n\
         selective-context,0.9043,0.525\n",
    )
    .unwrap();
    // report requires >= 1 JSON input; give it one trivial uncompressed row
    let own = dir.path().join("own.json");
    std::fs::write(
        &own,
        serde_json::json!({
            "method": "uncompressed", "performance": 0.9997, "length_reduction": 0.0,
            "pl_f1": 0.0, "raw_metric": 0.9997, "flop_ratio": 1.0,
            "samples": 1, "tokens_original": 1, "tokens_compressed": 1
        })
        .to_string(),
    )
    .unwrap();
    let out = ktm()
        .args(["report", "--input"])
        .arg(&own)
        .arg("--baselines")
        .arg(&baselines)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let f1_of = |method: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(method)).unwrap();
        line.split_whitespace().nth(3).unwrap().parse().unwrap()
    };
    assert!((f1_of("4-token") - 0.851).abs() < 0.001);
    assert!((f1_of("3-token") - 0.796).abs() < 0.001);
    assert!((f1_of("2-token") - 0.666).abs() < 0.001);
    assert!(f1_of("4-token") > f1_of("3-token") && f1_of("3-token") > f1_of("2-token"));
    assert!(f1_of("2-token") > f1_of("selective-context"));
}

#[test]
fn zero_epoch_run_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let trainer = tiny_trainer(&cfg, 0);
    let path = dir.path().join("zero.ktm1");
    ckpt::save_trainer(&path, &trainer, &snapshot(&cfg, &trainer, 0)).unwrap();
    let (loaded, snap) = ckpt::load_trainer(&path).unwrap();
    assert_eq!(snap.global_step, 0);
    let fresh = tiny_trainer(&cfg, 0);
    for (id, e) in fresh.store.iter() {
        let other = loaded.store.lookup(&e.name).unwrap();
        assert_eq!(fresh.store.data(id), loaded.store.data(other), "{} differs", e.name);
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let trainer = tiny_trainer(&cfg, 0);
    let path = dir.path().join("ok.ktm1");
    ckpt::save_trainer(&path, &trainer, &snapshot(&cfg, &trainer, 0)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.ktm1");
    std::fs::write(&bad, &bytes).unwrap();
    let err = match ckpt::load_trainer(&bad) {
        Err(e) => e,
        Ok(_) => panic!("corrupted checkpoint loaded"),
    };
    assert!(err.to_lowercase().contains("checksum"), "{err}");
    let out = ktm().args(["eval", "--checkpoint"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stalled_training_exits_with_divergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("stall.toml");
    std::fs::write(&cfg_path, TINY_TOML.replace("threshold = 0.0", "threshold = 1.01")).unwrap();
    let out = ktm()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out-dir")
        .arg(dir.path().join("run"))
        .args(["--epochs", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}
