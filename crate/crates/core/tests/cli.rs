//! The `oreo` binary end to end on a tiny world.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use oreo_core::synth::{WorldSpec, QA_HELDOUT_FILE, QA_TRAIN_FILE};
use oreo_core::train::TrainConfig;

fn oreo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oreo"))
        .args(args)
        .output()
        .expect("spawn oreo")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_spec() -> WorldSpec {
    let mut spec = WorldSpec::default();
    for t in &mut spec.entity_types {
        t.count = t.count.div_ceil(5).max(2);
    }
    for r in &mut spec.relations {
        r.per_source = r.per_source.min(2.0);
    }
    spec
}

fn tiny_config(data: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.layers = 2;
    cfg.model.d_model = 16;
    cfg.model.heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.d_entity = 8;
    cfg.batch_size = 2;
    cfg.steps = 3;
    cfg.log_every = 1;
    cfg.data = Some(data.to_path_buf());
    cfg
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let spec = root.join("world.toml");
    std::fs::write(&spec, tiny_spec().to_toml().unwrap()).unwrap();
    let data = root.join("data");
    let out = oreo(&["gen", "--spec", s(&spec), "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = root.join("train.toml");
    std::fs::write(&config, tiny_config(&data).to_toml().unwrap()).unwrap();
    let ckpt = root.join("model.ckpt");
    let out = oreo(&[
        "pretrain",
        "--config",
        s(&config),
        "--data",
        s(&data),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    Fixture {
        _dir: dir,
        root,
        data,
        config,
        ckpt,
    }
}

#[test]
fn gen_pretrain_eval_paths_gradcheck() {
    let f = fixture();
    assert!(f.data.join(QA_TRAIN_FILE).exists());
    assert!(f.ckpt.exists());

    let qa = f.data.join(QA_HELDOUT_FILE);
    let out = oreo(&["eval", "--ckpt", s(&f.ckpt), "--qa", s(&qa)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let h = metrics["overall"]["hits1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&h));

    let out = oreo(&["eval", "--ckpt", s(&f.ckpt), "--qa", s(&qa), "--remove-rel", "capital"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let report = f.root.join("paths.json");
    let qa_train = f.data.join(QA_TRAIN_FILE);
    let out = oreo(&[
        "paths",
        "--ckpt",
        s(&f.ckpt),
        "--rel",
        "capital",
        "--qa",
        s(&qa_train),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["path"].as_array().unwrap().len(), 2);

    let out = oreo(&["gradcheck", "--ckpt", s(&f.ckpt), "--data", s(&f.data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn ablate_reports_both_runs() {
    let f = fixture();
    let out = oreo(&["ablate", "--config", s(&f.config), "--drop", "both"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(rep["full"]["overall"]["count"].as_u64().unwrap() > 0);
    assert_eq!(rep["full"]["overall"]["count"], rep["ablated"]["overall"]["count"]);
}

#[test]
fn validation_errors_exit_one() {
    let f = fixture();
    let qa = f.data.join(QA_HELDOUT_FILE);
    let out = oreo(&[
        "eval",
        "--ckpt",
        s(&f.ckpt),
        "--qa",
        s(&qa),
        "--remove-rel",
        "no_such_relation",
    ]);
    assert_eq!(code(&out), 1);
    let out = oreo(&["eval", "--ckpt", s(&f.root.join("missing.ckpt")), "--qa", s(&qa)]);
    assert_eq!(code(&out), 1);

    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "steps = \"many\"\n").unwrap();
    let out = oreo(&[
        "pretrain",
        "--config",
        s(&bad),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(code(&out), 1);

    let mut cfg = tiny_config(&f.data);
    cfg.model.depth = 5;
    std::fs::write(&bad, cfg.to_toml().unwrap()).unwrap();
    let out = oreo(&[
        "pretrain",
        "--config",
        s(&bad),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(code(&out), 1);

    let garbage = f.root.join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = oreo(&["gradcheck", "--ckpt", s(&garbage), "--data", s(&f.data)]);
    assert_eq!(code(&out), 1);
}

#[test]
fn diverging_training_exits_two() {
    let f = fixture();
    let mut cfg = tiny_config(&f.data);
    cfg.optimizer.lr = 1e300;
    cfg.steps = 20;
    let path = f.root.join("explode.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = oreo(&[
        "pretrain",
        "--config",
        s(&path),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.root.join("x").exists());
}
