//! End-to-end pipeline through the installed binary: corpus generation,
//! pretraining, fine-tuning, adaptation, decoding, scoring, plus the
//! exit-code contract.

use std::path::Path;
use std::process::{Command, Output};

fn avsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY_CONFIG: &str = "\
[corpus]
num_speakers = 2
utterances_per_speaker = 4
phone_inventory = 3
min_phones = 1
max_phones = 2

[model]
width = 8
enc_blocks = 1
dec_blocks = 1
heads = 2
ffn = 12
n_tokens = 3
conv_pos_kernel = 3

[pretrain]
steps = 2
target_layers = 1

[finetune]
steps = 2

[adapt]
steps = 1
speaker = target-s00

[decode]
beam = 2
max_len = 3

[score]
bootstrap_samples = 20
";

#[test]
fn pipeline_runs_end_to_end_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();

    let corpus = p("corpus");
    assert_ok(&avsd(&["gen-corpus", "--config", cfg, "--out", &corpus]), "gen-corpus");
    let manifest = format!("{corpus}/manifest.jsonl");
    assert!(Path::new(&manifest).exists());
    assert!(Path::new(&corpus).join("run_meta.json").exists());

    let pre = p("pre");
    assert_ok(
        &avsd(&["pretrain", "--config", cfg, "--manifest", &manifest, "--out", &pre]),
        "pretrain",
    );
    let pre_ckpt = format!("{pre}/pretrain.ckpt");
    assert!(Path::new(&pre_ckpt).exists());

    let ft = p("ft");
    assert_ok(
        &avsd(&[
            "finetune", "--config", cfg, "--manifest", &manifest, "--out", &ft, "--init",
            &pre_ckpt,
        ]),
        "finetune",
    );
    let si_ckpt = format!("{ft}/si.ckpt");
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{ft}/run_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["command"], "finetune");
    assert!(meta["inputs"]["init"].is_string());

    // Transfer mode records zero freeze steps even when the config asks
    // for some.
    let ft2 = p("ft2");
    assert_ok(
        &avsd(&[
            "finetune", "--config", cfg, "--manifest", &manifest, "--out", &ft2, "--init",
            &pre_ckpt, "--transfer", "--set", "finetune.freeze_steps=2",
        ]),
        "finetune --transfer",
    );
    let meta2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{ft2}/run_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta2["freeze_steps"], "0");

    let ad = p("ad");
    assert_ok(
        &avsd(&["adapt", "--config", cfg, "--manifest", &manifest, "--out", &ad, "--init", &si_ckpt]),
        "adapt",
    );
    let sd_ckpt = format!("{ad}/sd.ckpt");
    assert!(Path::new(&sd_ckpt).exists());

    let dec = p("dec");
    let val_manifest = format!("{ft}/val_manifest.jsonl");
    assert_ok(
        &avsd(&[
            "decode", "--config", cfg, "--manifest", &val_manifest, "--out", &dec, "--models",
            &format!("{si_ckpt},{sd_ckpt}"), "--views", "lip,lip",
        ]),
        "decode",
    );
    let jsonl = format!("{dec}/decode.jsonl");
    assert!(Path::new(&jsonl).exists());

    let score = p("score");
    assert_ok(
        &avsd(&[
            "score", "--config", cfg, "--manifest", &val_manifest, "--out", &score, "--hyps",
            &jsonl,
        ]),
        "score",
    );
    let csv = std::fs::read_to_string(format!("{score}/score.csv")).unwrap();
    assert!(csv.starts_with("speaker_id,num_utts,N,S,I,D,CER,ci_low,ci_high"));
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));
}

#[test]
fn usage_and_config_errors_exit_two_runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let out_dir = dir.path().join("out").display().to_string();

    // Missing --config.
    let out = avsd(&["gen-corpus", "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));

    // Unknown config key names its line.
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "[pretrain]\nnot_a_key = 1\n").unwrap();
    let out = avsd(&["gen-corpus", "--config", bad.to_str().unwrap(), "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.cfg:2"), "{err}");

    // Mismatched model/view counts.
    let out = avsd(&[
        "decode", "--config", cfg, "--manifest", "m.jsonl", "--out", &out_dir, "--models",
        "a.ckpt,b.ckpt", "--views", "lip,face,lip",
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Unknown subcommand is a usage error.
    let out = avsd(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // Runtime failure: adapt handed a pretrain checkpoint.
    let corpus = dir.path().join("corpus").display().to_string();
    assert_ok(&avsd(&["gen-corpus", "--config", cfg, "--out", &corpus]), "gen-corpus");
    let manifest = format!("{corpus}/manifest.jsonl");
    let pre = dir.path().join("pre").display().to_string();
    assert_ok(
        &avsd(&["pretrain", "--config", cfg, "--manifest", &manifest, "--out", &pre]),
        "pretrain",
    );
    let out = avsd(&[
        "adapt", "--config", cfg, "--manifest", &manifest, "--out", &out_dir, "--init",
        &format!("{pre}/pretrain.ckpt"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage mismatch"));
}

#[test]
fn identical_invocations_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();

    let mut artifacts: Vec<Vec<u8>> = Vec::new();
    for run in ["one", "two"] {
        let base = dir.path().join(run);
        let p = |name: &str| base.join(name).display().to_string();
        let corpus = p("corpus");
        assert_ok(&avsd(&["gen-corpus", "--config", cfg, "--out", &corpus]), "gen-corpus");
        let manifest = format!("{corpus}/manifest.jsonl");
        let pre = p("pre");
        assert_ok(
            &avsd(&["pretrain", "--config", cfg, "--manifest", &manifest, "--out", &pre]),
            "pretrain",
        );
        let ft = p("ft");
        assert_ok(
            &avsd(&[
                "finetune", "--config", cfg, "--manifest", &manifest, "--out", &ft, "--init",
                &format!("{pre}/pretrain.ckpt"),
            ]),
            "finetune",
        );
        let dec = p("dec");
        assert_ok(
            &avsd(&[
                "decode", "--config", cfg, "--manifest", &format!("{ft}/val_manifest.jsonl"),
                "--out", &dec, "--models", &format!("{ft}/si.ckpt"), "--views", "lip",
            ]),
            "decode",
        );
        for f in [
            format!("{pre}/pretrain.ckpt"),
            format!("{ft}/si.ckpt"),
            format!("{dec}/decode.jsonl"),
        ] {
            artifacts.push(std::fs::read(f).unwrap());
        }
    }
    assert_eq!(artifacts[0], artifacts[3], "pretrain checkpoints differ");
    assert_eq!(artifacts[1], artifacts[4], "si checkpoints differ");
    assert_eq!(artifacts[2], artifacts[5], "decode outputs differ");
}
