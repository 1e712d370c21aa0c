use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stformer::backbone::ModelConfig;
use stformer::heads::{StrConfig, StrModel};

fn stformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stformer"))
        .args(args)
        .env_remove("STFORMER_OUT_ROOT")
        .output()
        .expect("run stformer")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, count: usize, seed: u64) -> PathBuf {
    let out = dir.join(name);
    let o = stformer(&[
        "gen-data",
        "--count",
        &count.to_string(),
        "--seed",
        &seed.to_string(),
        "--vocab-size",
        "4",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("samples.jsonl")
}

const TINY: &[&str] = &[
    "--preset",
    "desk-10k",
    "--resolution",
    "32",
    "--max-steps",
    "3",
    "--batch-size",
    "4",
    "--eval-interval",
    "1",
    "--warmup-steps",
    "1",
    "--lr",
    "0.001",
    "--eval-fraction",
    "0.25",
];

fn train(data: &Path, out: &Path, stage: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--stage", stage, "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    stformer(&args)
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a", 30, 1);
    let b = gen(dir.path(), "b", 30, 1);
    let c = gen(dir.path(), "c", 30, 2);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest = std::fs::read_to_string(dir.path().join("a/manifest-gen-data.json")).unwrap();
    assert!(manifest.contains("\"code_version\""));
    assert!(!dir.path().join("a/.stformer.lock").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = stformer(&["gen-data", "--count", "3", "--bogus"]);
    assert_eq!(code(&o), 2);
    let o = stformer(&["gen-data", "--count", "3", "--templates", "flying", "--out", "/nonexistent/x"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn train_eval_round_trip_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 24, 3);
    let run = dir.path().join("run");
    let o = train(&data, &run, "backbone", &["--gnuplot"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["model.ckpt", "loss-backbone.csv", "loss-backbone.gp", "manifest-train-backbone.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let again = dir.path().join("again");
    assert_eq!(code(&train(&data, &again, "backbone", &["--gnuplot"])), 0);
    for f in ["model.ckpt", "loss-backbone.csv"] {
        assert_eq!(std::fs::read(run.join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f} differs on replay");
    }

    let eval_out = dir.path().join("eval");
    let ckpt = run.join("model.ckpt");
    let o = stformer(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--eval-fraction", "0.25", "--out", p(&eval_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\ncount,"));

    // The standalone metrics command reproduces the eval report.
    let m_out = dir.path().join("metrics");
    let pred = eval_out.join("predictions.jsonl");
    let o = stformer(&["metrics", "--pred", p(&pred), "--gt", p(&data), "--out", p(&m_out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(metrics, std::fs::read_to_string(m_out.join("metrics.csv")).unwrap());

    // The diffusion stage picks the backbone checkpoint up from --out.
    let o = train(&data, &run, "diffusion", &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = stformer(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--flags", "decoder=diffusion", "--out", p(&dir.path().join("eval2"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn untrained_checkpoint_still_gets_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 12, 4);
    let mut cfg = StrConfig::new(ModelConfig::preset("desk-10k").unwrap());
    cfg.raster_resolution = 32;
    let ckpt = dir.path().join("fresh.ckpt");
    StrModel::new(cfg, None, 0).unwrap().save(&ckpt).unwrap();
    let out = dir.path().join("eval");
    let o = stformer(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "all", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("scenarios: 12"));
}

#[test]
fn incompatible_flags_name_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 12, 5);
    let run = dir.path().join("run");
    assert_eq!(code(&train(&data, &run, "backbone", &[])), 0);
    let ckpt = run.join("model.ckpt");
    let o = stformer(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--flags", "decoder=diffusion", "--out", p(&dir.path().join("e"))]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("model.ckpt") && err.contains("decoder=diffusion"), "{err}");

    let o = train(&data, &run, "diffusion", &["--components", "CS"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--components CS"));
}

#[test]
fn diffusion_stage_without_a_checkpoint_is_a_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 12, 6);
    let o = train(&data, &dir.path().join("empty"), "diffusion", &[]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 12, 7);
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".stformer.lock"), "1").unwrap();
    let o = train(&data, &run, "backbone", &[]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn malformed_inputs_exit_with_the_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 6, 8);
    let pred = dir.path().join("bad.jsonl");
    std::fs::write(&pred, "{not json\n").unwrap();
    let o = stformer(&["metrics", "--pred", p(&pred), "--gt", p(&data), "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let o = stformer(&["metrics", "--pred", p(&dir.path().join("missing.jsonl")), "--gt", p(&data), "--out", p(&dir.path().join("m2"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 12, 9);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "lr = 0.002\nweight_decay = 0.05\n").unwrap();
    let run = dir.path().join("run");
    let o = train(&data, &run, "backbone", &["--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest-train-backbone.json")).unwrap()).unwrap();
    let t = &m["config"]["train"];
    assert_eq!(t["lr"], 0.001, "flag should win over the file");
    assert_eq!(t["weight_decay"], 0.05, "file should win over the default");
    assert_eq!(t["eval_interval"], 1);

    std::fs::write(&cfg, "learning_rate = 1\n").unwrap();
    let o = train(&data, &dir.path().join("run2"), "backbone", &["--config", p(&cfg)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_stformer"))
        .args(["gen-data", "--count", "5", "--vocab-size", "2"])
        .env("STFORMER_OUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("gen-data/samples.jsonl").exists());
}

#[test]
fn sweep_and_ablation_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "data", 24, 10);
    let out = dir.path().join("sweep");
    let mut args = vec!["sweep", "--presets", "desk-10k,desk-50k", "--sizes", "6,12", "--data", p(&data), "--out", p(&out), "--gnuplot"];
    args.extend_from_slice(TINY);
    let o = stformer(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(std::fs::read_to_string(out.join("slopes.csv")).unwrap().starts_with("axis,key,slope\n"));

    let out = dir.path().join("ablate");
    let mut args = vec!["ablate", "--axis", "kp-order", "--data", p(&data), "--out", p(&out)];
    args.extend_from_slice(TINY);
    let o = stformer(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["CKS-fwd", "CKS-bkwd-mlp"]);
}
