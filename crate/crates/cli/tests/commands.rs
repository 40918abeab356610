use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use relgraph::model::ModelConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relgraph"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small but complete model so every command finishes in seconds.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ModelConfig::default();
    cfg.dims.classes = 3;
    cfg.dims.feature_channels = 8;
    cfg.dims.gqm_width = 16;
    cfg.dims.model_dim = 16;
    cfg.dims.heads = 2;
    cfg.dims.ffn_dim = 32;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.quant.qat_epochs = 1;
    cfg.quant.calibration_batches = 2;
    let p = dir.join("cfg.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let out = dir.join(out);
    let o = run(&[
        "--config",
        path(cfg),
        "--seed",
        "7",
        "--out",
        path(&out),
        "gen-data",
        "--images",
        "24",
        "--test-images",
        "8",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn kv(file: &Path, key: &str) -> String {
    let text = std::fs::read_to_string(file).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing from {}", file.display()))
        .to_string()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    let lines: Vec<_> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = gen(dir.path(), &cfg, "a");
    let b = gen(dir.path(), &cfg, "b");
    let ta = tree(&a);
    assert!(ta
        .iter()
        .any(|(p, _)| p.ends_with("train/annotations.json")));
    assert!(ta
        .iter()
        .any(|(p, _)| p.extension().is_some_and(|e| e == "png")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");

    let o = run(&["--no-such-flag", "stats"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");

    let o = run(&[
        "--config",
        "/nonexistent/cfg.toml",
        "--out",
        path(&out),
        "stats",
        "--data",
        "x.json",
    ]);
    assert_eq!(o.status.code(), Some(3));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[dims]\nclasses = 1\n").unwrap();
    let o = run(&[
        "--config",
        path(&bad),
        "--out",
        path(&out),
        "stats",
        "--data",
        "x.json",
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["code"], 3);

    let o = run(&[
        "--out",
        path(&out),
        "eval",
        "--checkpoint",
        "/nonexistent.rgnet",
        "--data",
        "x.json",
    ]);
    assert_eq!(o.status.code(), Some(4));

    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "[{\"id\": \"a\"}]").unwrap();
    let o = run(&["--out", path(&out), "stats", "--data", path(&broken)]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(error_line(&o)["error"], "data");
}

#[test]
fn train_eval_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let train = data.join("train/annotations.json");
    let test = data.join("test/annotations.json");
    let input_before = tree(&data);

    let full = dir.path().join("full");
    let o = run(&[
        "--config",
        path(&cfg),
        "--out",
        path(&full),
        "train",
        "--data",
        path(&train),
        "--eval",
        path(&test),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read_to_string(full.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(full.join("checkpoint.toml").exists());

    let part = dir.path().join("part");
    let o = run(&[
        "--config",
        path(&cfg),
        "--out",
        path(&part),
        "train",
        "--data",
        path(&train),
        "--eval",
        path(&test),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success());
    let ckpt = part.join("checkpoint.rgnet");
    let o = run(&[
        "--out",
        path(&part),
        "train",
        "--resume",
        path(&ckpt),
        "--data",
        path(&train),
        "--eval",
        path(&test),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(full.join("checkpoint.rgnet")).unwrap(),
        std::fs::read(&ckpt).unwrap()
    );
    assert_eq!(
        std::fs::read(full.join("train.jsonl")).unwrap(),
        std::fs::read(part.join("train.jsonl")).unwrap()
    );

    let ev = dir.path().join("eval");
    let o = run(&[
        "--out",
        path(&ev),
        "eval",
        "--checkpoint",
        path(&full.join("checkpoint.rgnet")),
        "--data",
        path(&test),
    ]);
    assert!(o.status.success());
    assert!(ev.join("eval.txt").exists());
    let uni: usize = kv(&ev.join("eval.kv"), "unilateral.pairs").parse().unwrap();
    let bi: usize = kv(&ev.join("eval.kv"), "bilateral.pairs").parse().unwrap();
    assert_eq!(bi, 2 * uni);

    assert_eq!(tree(&data), input_before);
}

#[test]
fn ablate_emits_five_cumulative_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let out = dir.path().join("ab");
    let o = run(&[
        "--config",
        path(&cfg),
        "--out",
        path(&out),
        "ablate",
        "--data",
        path(&data.join("train/annotations.json")),
        "--eval",
        path(&data.join("test/annotations.json")),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kvf = out.join("ablation.kv");
    assert_eq!(kv(&kvf, "rows"), "5");
    let names: Vec<String> = (0..5).map(|k| kv(&kvf, &format!("row{k}.name"))).collect();
    assert_eq!(names, ["WBCE", "+Bilateral", "+Logit", "+GQM", "+SE"]);
    let text = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(text.lines().count(), 6);
}

#[test]
fn quantize_reports_sizes_and_both_metric_sets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let out = dir.path().join("q");
    let o = run(&[
        "--config",
        path(&cfg),
        "--out",
        path(&out),
        "quantize",
        "--data",
        path(&data.join("train/annotations.json")),
        "--eval",
        path(&data.join("test/annotations.json")),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let kvf = out.join("quantize.kv");
    let ratio: f64 = kv(&kvf, "file_ratio").parse().unwrap();
    assert!(ratio <= 0.35, "{ratio}");
    assert_eq!(kv(&kvf, "payload_ratio"), "0.25");
    for key in ["fp32_file_bytes", "int8_file_bytes", "fp32.mAP", "int8.mAP"] {
        kv(&kvf, key);
    }
    let fp32 = std::fs::metadata(out.join("model-fp32.rgnet"))
        .unwrap()
        .len();
    let int8 = std::fs::metadata(out.join("model-int8.rgnet"))
        .unwrap()
        .len();
    assert_eq!(kv(&kvf, "int8_file_bytes"), int8.to_string());
    assert!((int8 as f64) <= 0.35 * fp32 as f64);

    let ev = dir.path().join("ev");
    let o = run(&[
        "--out",
        path(&ev),
        "eval",
        "--checkpoint",
        path(&out.join("model-int8.rgnet")),
        "--data",
        path(&data.join("test/annotations.json")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        kv(&ev.join("eval.kv"), "unilateral.mAP"),
        kv(&kvf, "int8.mAP")
    );
}

#[test]
fn export_int8_needs_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = gen(dir.path(), &cfg, "data");
    let tr = dir.path().join("tr");
    let o = run(&[
        "--config",
        path(&cfg),
        "--out",
        path(&tr),
        "train",
        "--data",
        path(&data.join("train/annotations.json")),
        "--epochs",
        "1",
    ]);
    assert!(o.status.success());
    let ckpt = tr.join("checkpoint.rgnet");
    let ex = dir.path().join("ex");
    let o = run(&["--out", path(&ex), "export", "--checkpoint", path(&ckpt)]);
    assert!(o.status.success());
    assert!(ex.join("model-fp32.rgnet").exists());
    let o = run(&[
        "--out",
        path(&ex),
        "export",
        "--checkpoint",
        path(&ckpt),
        "--int8",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = run(&["--out", path(&out), "grad-check", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(kv(&out.join("gradcheck.kv"), "passed"), "true");
}
