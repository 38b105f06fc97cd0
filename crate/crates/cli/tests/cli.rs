use std::path::Path;
use std::process::{Command, Output};

fn elnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elnet"))
        .args(args)
        .env("ELNET_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "{e}: stdout {:?}, stderr {:?}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn metrics_on_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let out = elnet(&["synth", "gen", "--out", path(dir.path()), "--seed", "1", "--n", "4", "--size", "32"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let gt = dir.path().join("gt");
    let o = elnet(&["metrics", "--pred", path(&gt), "--gt", path(&gt)]);
    assert_eq!(o.status.code(), Some(0));
    let r = stdout_json(&o);
    assert_eq!(r["acc"], 1.0);
    assert_eq!(r["miou"], 1.0);

    let coarse = dir.path().join("coarse");
    let report = dir.path().join("report.json");
    let o = elnet(&["metrics", "--pred", path(&coarse), "--gt", path(&gt), "--out", path(&report)]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["miou"].as_f64().unwrap() < 1.0);
}

#[test]
fn missing_prediction_is_a_domain_error() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    elnet(&["synth", "gen", "--out", path(a.path()), "--seed", "1", "--n", "2", "--size", "16"]);
    let o = elnet(&["metrics", "--pred", path(b.path()), "--gt", path(&a.path().join("gt"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = elnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = elnet(&["metrics", "--pred", "a", "--gt", "b", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_on_every_subcommand() {
    let cases: [&[&str]; 12] = [
        &[],
        &["synth", "gen"],
        &["pretrain"],
        &["finetune"],
        &["annotate"],
        &["enhance"],
        &["lqe"],
        &["metrics"],
        &["evalprotocol"],
        &["pipeline", "run"],
        &["gradcheck"],
        &["synth"],
    ];
    for c in cases {
        let mut args = c.to_vec();
        args.push("--help");
        let o = elnet(&args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        let text = String::from_utf8_lossy(&o.stdout);
        assert!(text.contains("Usage"), "{args:?}");
    }
    let text = String::from_utf8_lossy(&elnet(&["finetune", "--help"]).stdout).into_owned();
    for flag in ["--manifest", "--out", "--seed", "--config", "--set", "--lambda", "--batch-size", "--resume"] {
        assert!(text.contains(flag), "{flag}");
    }
}

#[test]
fn seed_is_mandatory_for_training() {
    let o = elnet(&["finetune", "--manifest", "m.jsonl", "--out", "x.eln", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--seed"));
}

fn dry_run(extra: &[&str]) -> Output {
    let mut args = vec!["finetune", "--manifest", "m.jsonl", "--out", "x.eln", "--seed", "3", "--dry-run"];
    args.extend_from_slice(extra);
    elnet(&args)
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[loss]\nlambda = 0.7\n").unwrap();
    let o = dry_run(&["--config", path(&cfg)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["loss"]["lambda"], 0.7);
    let o = dry_run(&["--config", path(&cfg), "--lambda", "0.3"]);
    assert_eq!(stdout_json(&o)["loss"]["lambda"], 0.3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("effective config"));
}

#[test]
fn empty_file_gives_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let c = stdout_json(&dry_run(&["--config", path(&cfg)]));
    assert_eq!(c["train"]["batch_size"], 12);
    assert_eq!(c["train"]["epochs"], 200);
    assert_eq!(c["train"]["learning_rate"], 0.001);
    assert_eq!(c["train"]["weight_decay"], 0.0005);
    assert_eq!(c["loss"]["lambda"], 0.5);
    assert_eq!(c["pipeline"]["loop_count"], 3);
    assert_eq!(c["train"]["seed"], 3);
}

#[test]
fn invalid_alpha_names_the_key() {
    let o = dry_run(&["--alpha", "0.5,0.6,0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    let o = dry_run(&["--set", "train.batch_size=\"x\""]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_elnet"))
        .args(["gradcheck", "--help"])
        .env("ELNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = Command::new(env!("CARGO_BIN_EXE_elnet"))
        .args(["metrics", "--pred", "a", "--gt", "b"])
        .env("ELNET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let o = elnet(&["synth", "gen", "--out", path(d.path()), "--seed", "8", "--n", "3", "--size", "16"]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["manifest.jsonl", "gt.jsonl", "images/scene_000.png", "coarse/scene_002.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn training_workflow_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = elnet(&["synth", "gen", "--out", path(d), "--seed", "2", "--n", "5", "--size", "16", "--labeled-fraction", "0.5"]);
    assert_eq!(o.status.code(), Some(0));
    let small: &[&str] = &[
        "--set",
        "model.stage_channels=[4,6,8,8]",
        "--set",
        "model.adapter_bottleneck=3",
        "--set",
        "model.rfb_branch_channels=3",
        "--set",
        "model.decoder_channels=5",
        "--epochs",
        "2",
        "--batch-size",
        "2",
    ];
    let manifest = d.join("manifest.jsonl");
    let backbone = d.join("backbone.eln");
    let mut args = vec!["pretrain", "--manifest", path(&manifest), "--out", path(&backbone), "--seed", "1"];
    args.extend_from_slice(small);
    let o = elnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let ck = d.join("model.eln");
    let log = d.join("train.jsonl");
    let mut args = vec![
        "finetune", "--manifest", path(&manifest), "--out", path(&ck), "--seed", "1", "--backbone", path(&backbone), "--log",
        path(&log),
    ];
    args.extend_from_slice(small);
    let o = elnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1]["mean_loss"].as_f64().is_some() && lines[1]["lr"].as_f64().is_some());

    let lqe_out = d.join("lqe");
    let mut args = vec![
        "lqe", "--manifest", path(&manifest), "--checkpoint", path(&ck), "--out", path(&lqe_out), "--seed", "1",
    ];
    args.extend_from_slice(small);
    let o = elnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    assert_eq!(r["retained"].as_u64().unwrap() + r["flagged"].as_u64().unwrap(), 5);
    assert_eq!(std::fs::read_to_string(lqe_out.join("lqe_reports.jsonl")).unwrap().lines().count(), 5);

    let ann = d.join("ann");
    let ann_manifest = d.join("annotate.jsonl");
    let mut args = vec![
        "annotate", "--manifest", path(&ann_manifest), "--out", path(&ann), "--seed", "1", "--loop-count", "1",
    ];
    args.extend_from_slice(small);
    let o = elnet(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o).as_array().unwrap().len(), 2);
    assert!(ann.join("manifest.jsonl").exists() && ann.join("progress.json").exists());

    let enh = d.join("enh");
    let mut args = vec!["enhance", "--manifest", path(&manifest), "--out", path(&enh), "--seed", "1", "--loop-count", "0"];
    args.extend_from_slice(small);
    assert_eq!(elnet(&args).status.code(), Some(0));

    let o = elnet(&[
        "evalprotocol",
        "--train",
        path(&manifest),
        "--test-hq",
        path(&d.join("gt.jsonl")),
        "--test-orig",
        path(&manifest),
        "--test-enh",
        path(&d.join("gt.jsonl")),
        "--seed",
        "1",
        "--set",
        "refnet.epochs=2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = stdout_json(&o);
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["delta_miou"], 0.0);
}
