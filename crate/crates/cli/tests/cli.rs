use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fastqa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastqa"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const GOLD: &str = r#"{"data": [{"paragraphs": [
  {"context": "The cat sat on the mat in 1688-1692.",
   "qas": [{"id": "q1", "question": "Who sat?", "answers": [{"text": "The cat", "answer_start": 0}]},
           {"id": "q2", "question": "When?", "answers": [{"text": "1688-1692", "answer_start": 26}]}]}]}]}"#;

#[test]
fn evaluate_identical_predictions() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gold.json"), GOLD).unwrap();
    fs::write(dir.path().join("p.json"), r#"{"q1": "The cat", "q2": "1688-1692"}"#).unwrap();
    let o = fastqa(&["evaluate", "--pred", "p.json", "--gold", "gold.json", "--out", "r.json"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["exact_match"], 100.0);
    assert_eq!(v["f1"], 100.0);
    assert!(dir.path().join("r.json").exists());
}

#[test]
fn evaluate_partial_and_missing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gold.json"), GOLD).unwrap();
    fs::write(dir.path().join("p.json"), r#"{"q1": "black cat"}"#).unwrap();
    let o = fastqa(
        &["evaluate", "--pred", "p.json", "--gold", "gold.json", "--per-question", "q.csv"],
        dir.path(),
    );
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["exact_match"], 0.0);
    let f1 = v["f1"].as_f64().unwrap();
    assert!((f1 - 100.0 / 3.0).abs() < 1e-9, "{f1}");
    let csv = fs::read_to_string(dir.path().join("q.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = fastqa(&["gradcheck", "--model", "fastqa", "--n", "7"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("fastqa loss"));
}

#[test]
fn bad_flags_and_paths_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!fastqa(&["train", "--bogus"], dir.path()).status.success());
    assert!(!fastqa(&["frobnicate"], dir.path()).status.success());
    let o = fastqa(&["train", "--data", "missing", "--out", "run"], dir.path());
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    assert!(!dir.path().join("run").exists());
    let o = fastqa(&["evaluate", "--pred", "nope.json", "--gold", "nope.json"], dir.path());
    assert!(!o.status.success());
}

#[test]
fn synth_train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(fastqa(&["synth", "--out", "s", "--train-size", "60", "--dev-size", "8"], d).status.success());
    for f in ["train.json", "dev.json", "embeddings.txt", "synth.config.json"] {
        assert!(d.join("s").join(f).exists(), "{f}");
    }
    let train = [
        "train", "--model", "fastqa", "--data", "s", "--out", "run", "--n", "6", "--no-char-cnn", "--max-steps", "4",
        "--checkpoint-every", "2", "--batch-size", "8",
    ];
    let o = fastqa(&train, d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.json", "metrics.jsonl", "last.ckpt", "best.ckpt", "model.ckpt", "summary.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let predict = |out: &str| {
        let o = fastqa(
            &[
                "predict", "--checkpoint", "run/model.ckpt", "--data", "s/dev.json", "--embeddings",
                "s/embeddings.txt", "--out", out, "--beam-k", "3",
            ],
            d,
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(d.join(out)).unwrap()
    };
    let a = predict("a.json");
    assert_eq!(a, predict("b.json"));
    let preds: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(&a).unwrap();
    assert_eq!(preds.len(), 8);
    assert!(d.join("a.config.json").exists());

    let o = fastqa(&["evaluate", "--pred", "a.json", "--gold", "s/dev.json"], d);
    assert!(o.status.success());
    let o = fastqa(&["diff", "--pred-a", "a.json", "--pred-b", "b.json", "--gold", "s/dev.json", "--out", "d.json"], d);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!((v["a_wins"].as_u64(), v["b_wins"].as_u64()), (Some(0), Some(0)));

    // resuming continues from the last checkpoint
    let mut resume = train.to_vec();
    let at = resume.iter().position(|a| *a == "4").unwrap();
    resume[at] = "6";
    resume.push("--resume");
    let o = fastqa(&resume, d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("run/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 6);
    assert_eq!(fs::read_to_string(d.join("run/metrics.jsonl")).unwrap().lines().count(), 3);

    // a checkpoint refuses a different embedding file
    fs::write(d.join("other.txt"), "zzz 1 2 3\n").unwrap();
    let o = fastqa(
        &["predict", "--checkpoint", "run/model.ckpt", "--data", "s/dev.json", "--embeddings", "other.txt", "--out", "x.json"],
        d,
    );
    assert!(!o.status.success());
    assert!(!d.join("x.json").exists());
}

#[test]
fn preprocess_cache_feeds_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(fastqa(&["synth", "--out", "s", "--train-size", "20", "--dev-size", "4"], d).status.success());
    let o = fastqa(&["preprocess", "--data", "s/dev.json", "--model", "bow", "--out", "dev.cache.json"], d);
    assert!(o.status.success());
    assert!(d.join("dev.cache.config.json").exists());
    let o = fastqa(
        &[
            "train", "--model", "bow", "--data", "s", "--dev", "dev.cache.json", "--out", "run", "--n", "4",
            "--max-steps", "2",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // a cache tokenized for another model is rejected
    let o = fastqa(
        &["train", "--model", "fastqa", "--data", "s", "--dev", "dev.cache.json", "--out", "run2", "--n", "4"],
        d,
    );
    assert!(!o.status.success());
    assert!(!d.join("run2").exists());
}
