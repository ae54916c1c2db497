use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

fn tsjoint(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsjoint"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsjoint(&["frobnicate"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsjoint(&["train", "--config", "nope.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_series_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{not json\n").unwrap();
    std::fs::write(dir.path().join("t.jsonl"), "{\"values\": [1, 2]}\n").unwrap();
    let out = tsjoint(
        &["eval", "forecast", "--pred", "bad.jsonl", "--truth", "t.jsonl", "--context", "t.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn tokenizer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = "the quick brown fox\njumps over the lazy dog\nthe dog sleeps\n";
    std::fs::write(dir.path().join("c.txt"), text).unwrap();
    ok(&tsjoint(
        &["tokenize", "train", "--input", "c.txt", "--vocab-size", "300", "--out", "v.json"],
        dir.path(),
    ));
    ok(&tsjoint(
        &["tokenize", "encode", "--vocab", "v.json", "--input", "c.txt", "--out", "ids.jsonl"],
        dir.path(),
    ));
    let out = tsjoint(&["tokenize", "decode", "--vocab", "v.json", "--input", "ids.jsonl"], dir.path());
    ok(&out);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), text);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
    for k in ["vocab_size", "tokens", "merges", "specials"] {
        assert!(v.get(k).is_some(), "{k}");
    }
}

#[test]
fn synth_is_deterministic_and_emits_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        let out = tsjoint(&["synth", "generate", "--n", "5", "--len", "64", "--seed", seed, "--json"], dir.path());
        ok(&out);
        let manifest: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        (out.stdout, manifest)
    };
    let (a, ma) = run("3");
    let (b, mb) = run("3");
    let (c, _) = run("4");
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["outputs"], mb["outputs"]);
    for k in ["command", "config_hash", "seed", "code_version", "wall_clock_ms", "outputs"] {
        assert!(ma.get(k).is_some(), "{k}");
    }
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 5);

    let forced = tsjoint(
        &["synth", "generate", "--n", "2", "--len", "32", "--force-kernel", "linear"],
        dir.path(),
    );
    ok(&forced);
    let bad = tsjoint(
        &["synth", "generate", "--n", "2", "--len", "32", "--force-kernel", "nonsense"],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
}

const RUN_TOML: &str = r#"
checkpoint_every = 25
warmup_steps = 5
[model]
vocab_size = 300
max_seq = 64
[stage1]
seq_len = 32
micro_batch = 4
total_steps = 50
[data]
series = "train.jsonl"
"#;

#[test]
fn end_to_end_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&tsjoint(
        &["synth", "generate", "--n", "20", "--len", "256", "--seed", "1", "--out", "train.jsonl"],
        d,
    ));
    std::fs::write(d.join("run.toml"), RUN_TOML).unwrap();
    ok(&tsjoint(&["train", "--config", "run.toml", "--out", "run"], d));
    let log = std::fs::read_to_string(d.join("run/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 50);

    // Context and held-out continuation from one synthetic batch.
    ok(&tsjoint(
        &["synth", "generate", "--n", "3", "--len", "120", "--seed", "9", "--out", "eval.jsonl"],
        d,
    ));
    let (mut ctx, mut truth) = (String::new(), String::new());
    for line in std::fs::read_to_string(d.join("eval.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let vals = v["values"].as_array().unwrap();
        let id = &v["id"];
        ctx += &format!("{}\n", serde_json::json!({"id": id, "values": vals[..96]}));
        truth += &format!("{}\n", serde_json::json!({"id": id, "values": vals[96..]}));
    }
    std::fs::write(d.join("ctx.jsonl"), ctx).unwrap();
    std::fs::write(d.join("truth.jsonl"), truth).unwrap();
    ok(&tsjoint(
        &["forecast", "--ckpt", "run/final.ckpt", "--input", "ctx.jsonl", "--horizon", "24", "--out", "pred.jsonl"],
        d,
    ));
    let pred = std::fs::read_to_string(d.join("pred.jsonl")).unwrap();
    assert_eq!(pred.lines().count(), 3);
    let first: serde_json::Value = serde_json::from_str(pred.lines().next().unwrap()).unwrap();
    assert_eq!(first["median"].as_array().unwrap().len(), 24);
    assert_eq!(first["quantiles"][0].as_array().unwrap().len(), 21);

    let again = tsjoint(
        &["forecast", "--ckpt", "run/final.ckpt", "--input", "ctx.jsonl", "--horizon", "24", "--no-cache"],
        d,
    );
    ok(&again);
    let recomputed = String::from_utf8(again.stdout).unwrap();
    for (a, b) in pred.lines().zip(recomputed.lines()) {
        let (a, b): (serde_json::Value, serde_json::Value) =
            (serde_json::from_str(a).unwrap(), serde_json::from_str(b).unwrap());
        for (x, y) in a["median"].as_array().unwrap().iter().zip(b["median"].as_array().unwrap()) {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} {y}");
        }
    }

    let out = tsjoint(
        &["eval", "forecast", "--pred", "pred.jsonl", "--truth", "truth.jsonl", "--context", "ctx.jsonl", "--season", "1"],
        d,
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["mase"]["tasks"].as_array().unwrap().len() + report["mase"]["skipped"].as_array().unwrap().len() == 3);
    assert!(report["wql"].get("geomean").is_some());
    assert!(start.elapsed().as_secs() < 120, "{:?}", start.elapsed());
}

#[test]
fn embed_probe_and_classification_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut cfg = RUN_TOML.replace("total_steps = 50", "total_steps = 2");
    cfg.push_str("[data.synth]\n");
    std::fs::write(d.join("run.toml"), cfg).unwrap();
    ok(&tsjoint(&["synth", "generate", "--n", "4", "--len", "64", "--out", "train.jsonl"], d));
    ok(&tsjoint(&["train", "--config", "run.toml", "--out", "run"], d));

    // Two well-separated classes: slow sines and fast sawtooth-like ramps.
    let (mut series, mut labels) = (String::new(), String::new());
    for i in 0..16 {
        let class = i % 2;
        let vals: Vec<f64> = (0..48)
            .map(|t| if class == 0 { (t as f64 * 0.1 + i as f64).sin() } else { ((t * 7 + i) % 5) as f64 * 3.0 })
            .collect();
        series += &format!("{}\n", serde_json::json!({"id": format!("s{i}"), "values": vals}));
        labels += &format!("{}\n", serde_json::json!({"id": format!("s{i}"), "label": if class == 0 { "a" } else { "b" }}));
    }
    std::fs::write(d.join("cls.jsonl"), series).unwrap();
    std::fs::write(d.join("labels.jsonl"), labels).unwrap();
    ok(&tsjoint(
        &["embed", "--ckpt", "run/final.ckpt", "--input", "cls.jsonl", "--repeat", "2", "--out", "emb.jsonl"],
        d,
    ));
    let emb = std::fs::read_to_string(d.join("emb.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(emb.lines().next().unwrap()).unwrap();
    assert_eq!(first["embedding"].as_array().unwrap().len(), 64);

    let out = tsjoint(
        &[
            "probe",
            "--embeddings",
            "emb.jsonl",
            "--labels",
            "labels.jsonl",
            "--predictions",
            "preds.jsonl",
            "--seed",
            "5",
            "--epochs",
            "2000",
        ],
        d,
    );
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["classes"], serde_json::json!(["a", "b"]));
    assert!(report["train"]["accuracy"].as_f64().unwrap() >= 0.9, "{report}");

    let out = tsjoint(&["eval", "cls", "--pred", "preds.jsonl", "--truth", "labels.jsonl"], d);
    ok(&out);
    let cls: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cls["accuracy"], report["train"]["accuracy"]);
    assert!(cls["auc"].as_f64().is_some());

    let pretty = tsjoint(&["eval", "cls", "--pred", "preds.jsonl", "--truth", "labels.jsonl", "--pretty"], d);
    ok(&pretty);
    assert!(String::from_utf8(pretty.stdout).unwrap().contains("macro_f1"));
}
