use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[pipeline]
ranker_dialogue = 10
eval_conversations = 30
[pipeline.synthetic]
n_feedback = 40
n_dialogue = 40
[pipeline.pretrain]
epochs = 1
[pipeline.disc_pretrain]
steps = 2
[pipeline.adversarial]
steps = 2
batch_size = 2
[pipeline.experiment]
seeds = [0, 1]
[pipeline.experiment.ranker]
d_model = 16
heads = 2
layers = 1
d_ff = 32
[pipeline.experiment.train]
steps = 3
batch_size = 4
"#;

fn f2r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_f2r"))
        .args(args)
        .env_remove("F2R_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = f2r(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct World {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn world(seed: &str) -> World {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let data = root.join("syn");
    ok(&[
        "make-synthetic",
        "--config",
        s(&config),
        "--seed",
        seed,
        "--out",
        s(&data),
    ]);
    World {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn lines(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count()
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = f2r(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
    let out = f2r(&["convert", "--mode", "bogus", "--in", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = f2r(&[
        "convert",
        "--mode",
        "heuristic",
        "--in",
        s(&missing),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[pipeline]\nunknown_key = 3\n").unwrap();
    let out = f2r(&["make-synthetic", "--config", s(&bad), "--out", s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn heuristic_convert_preserves_lines_and_input() {
    let w = world("0");
    let input = w.data.join("feedback.jsonl");
    let before = fs::read(&input).unwrap();
    let out = w.root.join("converted.jsonl");
    ok(&["convert", "--mode", "heuristic", "--in", s(&input), "--out", s(&out)]);
    assert_eq!(lines(&out), lines(&input));
    assert_eq!(fs::read(&input).unwrap(), before);
    for line in fs::read_to_string(&out).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["style"], 0);
        assert!(!v["response"].as_str().unwrap().is_empty());
    }
    assert!(w.root.join("converted.jsonl.manifest.json").exists());

    let same = f2r(&["convert", "--mode", "heuristic", "--in", s(&input), "--out", s(&input)]);
    assert_eq!(same.status.code(), Some(1));
    assert_eq!(fs::read(&input).unwrap(), before);
}

#[test]
fn data_dir_resolves_relative_inputs() {
    let w = world("0");
    let out = w.root.join("c.jsonl");
    let o = Command::new(env!("CARGO_BIN_EXE_f2r"))
        .args([
            "--data-dir",
            s(&w.data),
            "convert",
            "--mode",
            "heuristic",
            "--in",
            "feedback.jsonl",
            "--out",
            s(&out),
        ])
        .current_dir(&w.root)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(lines(&out), lines(&w.data.join("feedback.jsonl")));
}

#[test]
fn make_synthetic_is_seeded() {
    let a = world("3");
    let b = world("3");
    let c = world("4");
    for f in [
        "dialogue.jsonl",
        "feedback.jsonl",
        "oracle.jsonl",
        "test.jsonl",
        "manifest.json",
    ] {
        assert_eq!(
            fs::read(a.data.join(f)).unwrap(),
            fs::read(b.data.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.data.join("feedback.jsonl")).unwrap(),
        fs::read(c.data.join("feedback.jsonl")).unwrap()
    );
    assert_eq!(lines(&a.data.join("dev.jsonl")), 30);
}

#[test]
fn ranker_evaluation_is_reproducible() {
    let w = world("0");
    let train = |out: &Path| {
        ok(&[
            "train-ranker",
            "--config",
            s(&w.config),
            "--seed",
            "7",
            "--in",
            s(&w.data.join("ranker-dialogue.jsonl")),
            s(&w.data.join("feedback.jsonl")),
            "--out",
            s(out),
        ])
    };
    let r1 = w.root.join("r1");
    let r2 = w.root.join("r2");
    train(&r1);
    train(&r2);
    assert_eq!(
        fs::read(r1.join("manifest.json")).unwrap(),
        fs::read(r2.join("manifest.json")).unwrap()
    );
    assert_eq!(
        fs::read(r1.join("ranker.ckpt")).unwrap(),
        fs::read(r2.join("ranker.ckpt")).unwrap()
    );

    let eval = |ckpt: &Path, out: &Path| {
        ok(&[
            "evaluate",
            "--seed",
            "7",
            "--ranker",
            s(&ckpt.join("ranker.ckpt")),
            "--data",
            s(&w.data.join("test.jsonl")),
            "--out",
            s(out),
        ])
    };
    let e1 = w.root.join("e1");
    let e2 = w.root.join("e2");
    let stdout = eval(&r1, &e1);
    eval(&r2, &e2);
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    let hits = v["hits@1/20"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&hits));
    assert_eq!(v["n"], 30);
    assert_eq!(v["seed"], 7);
    for f in ["metrics.json", "manifest.json"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(e1.join("manifest.json")).unwrap();
    assert!(!manifest.contains(s(&w.root)), "manifest leaks absolute paths");
}

#[test]
fn converter_training_round_trip() {
    let w = world("0");
    let ing = w.root.join("ing");
    ok(&[
        "ingest",
        "--config",
        s(&w.config),
        "--in",
        s(&w.data.join("dialogue.jsonl")),
        "--feedback",
        s(&w.data.join("feedback.jsonl")),
        "--out",
        s(&ing),
    ]);
    let total: usize = ["train.jsonl", "valid.jsonl", "test.jsonl"]
        .iter()
        .map(|f| lines(&ing.join(f)))
        .sum();
    assert_eq!(total, 80);

    let model = w.root.join("model");
    let stdout = ok(&[
        "train-f2r",
        "--config",
        s(&w.config),
        "--in",
        s(&ing),
        "--out",
        s(&model),
    ]);
    let m: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(m["steps"], 2);
    for f in [
        "generator.ckpt",
        "discriminator.ckpt",
        "vocab.json",
        "history.csv",
        "metrics.json",
        "manifest.json",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }

    let input = w.data.join("feedback.jsonl");
    let out = w.root.join("f2r.jsonl");
    ok(&[
        "convert",
        "--config",
        s(&w.config),
        "--mode",
        "f2r",
        "--ckpt",
        s(&model.join("generator.ckpt")),
        "--in",
        s(&input),
        "--out",
        s(&out),
    ]);
    assert_eq!(lines(&out), lines(&input));

    let att = w.root.join("att.jsonl");
    ok(&[
        "export-attention",
        "--ckpt",
        s(&model.join("discriminator.ckpt")),
        "--in",
        s(&input),
        "--out",
        s(&att),
    ]);
    let text = fs::read_to_string(&att).unwrap();
    assert_eq!(text.lines().count(), lines(&input));
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let tokens = first["tokens"].as_array().unwrap().len();
    for head in first["layers"][0].as_array().unwrap() {
        let row: Vec<f64> = head.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(row.len(), tokens);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn synthetic_experiment_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("exp");
    ok(&["run-experiment", "--config", s(&config), "--out", s(&out)]);
    let agg = fs::read_to_string(out.join("aggregate.csv")).unwrap();
    let rows: Vec<&str> = agg.lines().collect();
    assert_eq!(rows[0], "setting,dev_mean,dev_variance,test_mean,test_variance");
    assert_eq!(rows.len(), 5);
    for s in ["NOFEEDBACK", "FEEDBACK", "HEURISTIC", "FEED2RESP"] {
        assert!(out.join(format!("report-{s}.json")).exists());
    }
}
