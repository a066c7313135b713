use std::path::Path;
use std::process::{Command, Output};

fn adc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a small dataset and a matching fast training config.
fn fixture(dir: &Path) {
    std::fs::write(
        dir.join("synth.json"),
        r#"{"num_classes": 2, "images_per_class": 10, "captions_per_image": 2, "feature_dim": 16, "seed": 5}"#,
    )
    .unwrap();
    std::fs::write(
        dir.join("train.json"),
        r#"{"total_epochs": 3, "episodes_per_epoch": 4, "pretrain_epochs_actor": 2,
            "pretrain_epochs_critics": 1, "hidden_size": 8, "checkpoint_every": 1, "seed": 8}"#,
    )
    .unwrap();
    let o = adc(&["synth", "--config", s(&dir.join("synth.json")), "--out", s(&dir.join("data.jsonl"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    assert_eq!(adc(&["--help"]).status.code(), Some(0));
    assert_eq!(adc(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(adc(&["evaluate"]).status.code(), Some(1));
    let missing = adc(&["evaluate", "--data", "/nonexistent/data.jsonl", "--checkpoint", "/nonexistent/c.adc"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let again = dir.path().join("again.jsonl");
    let o = adc(&["synth", "--config", s(&dir.path().join("synth.json")), "--out", s(&again)]);
    assert!(o.status.success());
    let a = std::fs::read(dir.path().join("data.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(&again).unwrap());
    assert_eq!(a.iter().filter(|b| **b == b'\n').count(), 20);
}

#[test]
fn pretrain_caption_evaluate_probe() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let (data, cfg, ck) = (d.join("data.jsonl"), d.join("train.json"), d.join("pre.adc"));
    let o = adc(&["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let common = ["--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ck)];
    let o = adc(&[&["caption", "--all-test"][..], &common].concat());
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    let test_count = std::fs::read_to_string(&data).unwrap().matches(r#""split":"test""#).count();
    assert!(test_count > 0);
    assert_eq!(lines.len(), test_count);
    assert!(lines.iter().all(|l| l.split('\t').count() == 2));

    let o = adc(&[&["evaluate", "--split", "train"][..], &common].concat());
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"] {
        let v = json[key].as_f64().unwrap();
        assert!(v >= 0.0, "{key} = {v}");
    }

    let id = lines[0].split('\t').next().unwrap().to_string();
    for source in ["gt", "gen", "cross"] {
        let o = adc(&[&["probe", "--id", &id, "--source", source][..], &common].concat());
        assert!(o.status.success());
        let out = stdout(&o);
        assert!(out.starts_with("dim,recon,feature,absdiff\n"));
        assert_eq!(out.lines().count(), 8 + 2);
        let cos: f64 = out.lines().last().unwrap().strip_prefix("cosine,").unwrap().parse().unwrap();
        assert!((-1.0..=1.0).contains(&cos));
    }
    let o = adc(&[&["caption", "--id", "no_such_id"][..], &common].concat());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn interrupted_training_resumes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let (data, cfg) = (d.join("data.jsonl"), d.join("train.json"));
    let run = |out: &Path, extra: &[&str]| {
        let base = ["train", "--config", s(&cfg), "--data", s(&data), "--out", s(out)];
        let o = adc(&[&base[..], extra].concat());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (full, split) = (d.join("full"), d.join("split"));
    run(&full, &[]);
    run(&split, &["--stop-after-epochs", "1"]);
    let ck = split.join("checkpoint.adc");
    run(&split, &["--checkpoint", s(&ck)]);
    for f in ["checkpoint.adc", "rewards.csv"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(split.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(full.join("rewards.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 * 4);
}

#[test]
fn gradcheck_reports_every_component() {
    let o = adc(&["gradcheck"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("component,max_rel_error,coords_checked,kinks_skipped,status"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.ends_with(",PASS")));
}
