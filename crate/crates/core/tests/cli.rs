//! End-to-end smoke run of the command-line tool on a tiny corpus.

use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn scdlab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_scdlab"))
        .args(args)
        .env_remove("SCDLAB_SEED")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn ok(args: &[&str]) -> String {
    let (code, text) = scdlab(args);
    assert_eq!(code, 0, "{args:?}\n{text}");
    text
}

fn write_json(path: &Path, v: Value) -> String {
    std::fs::write(path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_owned();
    let synth = write_json(
        &dir.path().join("synth.json"),
        json!({ "n_utterances": 6, "n_test_utterances": 3, "max_utterance_s": 4.0,
                "segment_words": [2, 4], "word_frames": [10, 14] }),
    );
    let model = write_json(
        &dir.path().join("model.json"),
        json!({ "input_dim": 16, "n_languages": 2, "conv_channels": [2, 2], "model_dim": 8,
                "n_layers": 2, "n_heads": 2, "ff_dim": 16, "chunk_frames": 16, "vocab_size": 22 }),
    );
    let train = |stage: &str| {
        write_json(
            &dir.path().join(format!("{stage}.json")),
            json!({ "stage": stage, "steps": 2, "batch_size": 2,
                    "enc_schedule": { "peak": 1e-3, "warmup_steps": 2 },
                    "dec_schedule": { "peak": 1e-3, "warmup_steps": 2 },
                    "mvn": "utterance", "checkpoint_every": 1 }),
        )
    };

    ok(&["synth", "--config", &synth, "--seed", "5", "--out", &d("data")]);
    ok(&["synth", "--config", &synth, "--seed", "5", "--out", &d("data2")]);
    let h1 = read_json(&dir.path().join("data/run_manifest.json"))["hashes"].clone();
    let h2 = read_json(&dir.path().join("data2/run_manifest.json"))["hashes"].clone();
    assert_eq!(h1, h2, "same seed, same corpus");

    ok(&["train", "--stage", "bestrq", "--config", &train("bestrq"), "--model", &model,
         "--data", &d("data"), "--out", &d("s1"), "--seed", "1"]);
    assert!(dir.path().join("s1/quantizer.scdt").is_file());
    assert!(dir.path().join("s1/ckpt_step000001.scdt").is_file());
    ok(&["train", "--stage", "asr", "--config", &train("asr"), "--init", &d("s1/model.scdt"),
         "--data", &d("data"), "--out", &d("s2")]);

    let (code, _) = scdlab(&["train", "--stage", "scd", "--config", &train("scd"),
                             "--data", &d("data"), "--out", &d("bad")]);
    assert_eq!(code, 2, "scd without an init checkpoint is a usage error");

    ok(&["train", "--stage", "scd", "--config", &train("scd"), "--init", &d("s2/model.scdt"),
         "--freeze", "first_and_last_1", "--data", &d("data"), "--out", &d("s3")]);
    let log = std::fs::read_to_string(dir.path().join("s3/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    ok(&["decode", "--model", &d("s3/model.scdt"), "--data", &d("data"), "--st-scale-sweep", "1:3:1",
         "--dump-posteriors", "--out", &d("dec")]);
    let summary = read_json(&dir.path().join("dec/sweep_summary.json"));
    assert_eq!(summary["rows"].as_array().unwrap().len(), 3);
    for lam in ["1.00", "2.00", "3.00"] {
        assert!(dir.path().join(format!("dec/hyp_lambda_{lam}.jsonl")).is_file());
    }

    let text = ok(&["score", "--refs", &d("data/test.jsonl"), "--hyps", &d("dec/hyp_lambda_1.00.jsonl"),
                    "--group-by", "language", "--out", &d("score")]);
    assert!(text.contains("pooled"), "{text}");
    let report = read_json(&dir.path().join("score/report.json"));
    assert!(report["pooled"]["f1"].is_number(), "{report}");

    let (code, text) = scdlab(&["score", "--refs", &d("data/train.jsonl"), "--hyps",
                                &d("dec/hyp_lambda_1.00.jsonl"), "--out", &d("orphans")]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn bad_invocations_exit_with_usage_code() {
    assert_eq!(scdlab(&["frobnicate"]).0, 2);
    assert_eq!(scdlab(&["decode", "--model", "/nonexistent/m.scdt", "--data", "/nonexistent", "--out", "/tmp/x"]).0, 2);
    assert_eq!(scdlab(&["--help"]).0, 0);
}
