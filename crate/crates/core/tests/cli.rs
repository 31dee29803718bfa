//! End-to-end runs of the `ctxlora` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

fn ctxlora(out: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ctxlora"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = ctxlora(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["synth-data", "--num-docs", "2", "--lm-docs", "4"]);
    ok(out, &["train-backbone", "--epochs", "1"]);
    ok(out, &["pretrain", "--max-steps", "3", "--checkpoint-every", "2"]);
    ok(out, &["ift", "--max-steps", "2"]);
    fs::write(out.join("ctx.txt"), "lu's pet is 263.").unwrap();
    ok(out, &["gen-lora", "--context-file", out.join("ctx.txt").to_str().unwrap()]);
    ok(out, &["answer", "--question", "what is lu's pet?", "--max-new", "4"]);
    ok(out, &["eval", "--methods", "naive,in_context,hypernet", "--limit", "1"]);
    ok(out, &["cost", "--H", "64", "--L", "4", "--V", "256", "--C", "50", "--I", "10", "--r", "2", "--Lp", "2", "--T", "10"]);

    for f in [
        "config.resolved.toml",
        "data/train.jsonl",
        "data/lm.jsonl",
        "backbone",
        "pretrain/metrics.jsonl",
        "pretrain/checkpoints/step-000002",
        "pretrain/final",
        "ift/final",
        "adapter",
        "answer.json",
        "eval/results.jsonl",
        "eval/summary.json",
        "eval/f1_by_turn.csv",
        "cost_report.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let metrics = fs::read_to_string(out.join("pretrain/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    // The answer is produced without the context in the model input.
    let answer: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("answer.json")).unwrap()).unwrap();
    let input: Vec<u32> = serde_json::from_value(answer["input_tokens"].clone()).unwrap();
    let ctx = ctxlora::tokenizer::encode("lu's pet is 263.");
    assert!(!input.windows(ctx.len()).any(|w| w == ctx.as_slice()));

    let cost: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("cost_report.json")).unwrap()).unwrap();
    assert_eq!(cost["hypernet_amortized"]["total"], 66_336_768u64);
    assert_eq!(cost["inputs"]["m"], 37);
}

#[test]
fn exit_codes_distinguish_usage_and_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ctxlora(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(ctxlora(dir.path(), &["cost", "--r", "x"]).status.code(), Some(2));
    // No backbone has been trained in this directory.
    let o = ctxlora(dir.path(), &["pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train-backbone"));
    assert_eq!(ctxlora(dir.path(), &["cost", "--H", "0"]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[hypernet]\nm2p_layers = 3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ctxlora"))
        .args(["--config", cfg.to_str().unwrap(), "cost"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}
