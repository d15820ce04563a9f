use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"model":{"hidden":8,"layers":1,"heads":2,"ff_dim":16,"lstm_hidden":4,"mlp_hidden":8},
"pretrain":{"epochs":1,"batch_size":8},"finetune":{"epochs":1,"batch_size":8}}"#;

fn atwwm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atwwm"))
        .current_dir(dir)
        .env("ATWWM_LOG", "off")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = atwwm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    ok(dir.path(), &["synth-data", "--n", "90", "--seed", "4", "--run-dir", "data"]);
    dir
}

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let dir = setup();
    let d = dir.path();
    for run in ["a", "b"] {
        ok(d, &["pretrain", "--config", "small.json", "--data", "data/train.jsonl", "--run-dir", &format!("{run}/pre")]);
        ok(
            d,
            &[
                "finetune", "--config", "small.json", "--data", "data/train.jsonl", "--init",
                &format!("{run}/pre/checkpoint.atwm"), "--run-dir", &format!("{run}/ft"),
            ],
        );
    }
    for f in ["pre/checkpoint.atwm", "pre/loss.csv", "ft/checkpoint.atwm", "ft/loss.csv", "ft/vocab.tsv"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f} differs");
    }
}

#[test]
fn synth_data_is_deterministic_and_seed_sensitive() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["synth-data", "--n", "90", "--seed", "4", "--run-dir", "again"]);
    ok(d, &["synth-data", "--n", "90", "--seed", "5", "--run-dir", "other"]);
    for f in ["corpus.jsonl", "train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(read(d, &format!("data/{f}")), read(d, &format!("again/{f}")));
    }
    assert_ne!(read(d, "data/corpus.jsonl"), read(d, "other/corpus.jsonl"));
}

#[test]
fn saved_config_reproduces_the_run() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["finetune", "--config", "small.json", "--data", "data/train.jsonl", "--epsilon", "0.3", "--run-dir", "first"]);
    ok(d, &["finetune", "--config", "first/config.json", "--run-dir", "second"]);
    assert_eq!(read(d, "first/checkpoint.atwm"), read(d, "second/checkpoint.atwm"));
    assert_eq!(read(d, "first/config.json"), read(d, "second/config.json"));
}

#[test]
fn evaluate_and_attack_write_reports() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["finetune", "--config", "small.json", "--data", "data/train.jsonl", "--run-dir", "ft"]);
    let stdout = ok(d, &["evaluate", "--checkpoint", "ft/checkpoint.atwm", "--data", "data/test.jsonl", "--run-dir", "ev"]);
    let metrics: serde_json::Value = serde_json::from_slice(&read(d, "ev/metrics.json")).unwrap();
    assert_eq!(serde_json::from_str::<serde_json::Value>(&stdout).unwrap(), metrics);
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    ok(d, &["attack-eval", "--checkpoint", "ft/checkpoint.atwm", "--data", "data/test.jsonl", "--epsilon", "0.5", "--run-dir", "at"]);
    let attack: serde_json::Value = serde_json::from_slice(&read(d, "at/attack.json")).unwrap();
    assert_eq!(attack["epsilon"], 0.5);
    assert_eq!(attack["clean"]["accuracy"].as_f64().unwrap(), acc);
}

#[test]
fn timestamped_run_dirs_do_not_collide() {
    let dir = setup();
    let d = dir.path();
    for _ in 0..2 {
        ok(d, &["synth-data", "--n", "30", "--seed", "1", "--out", "runs"]);
    }
    let runs: Vec<_> = std::fs::read_dir(d.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 2);
    for r in runs {
        let name = r.unwrap().file_name().into_string().unwrap();
        assert!(name.contains("-seed1"), "{name}");
    }
}

#[test]
fn loss_curves_merge_and_name_bad_runs() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["pretrain", "--config", "small.json", "--data", "data/train.jsonl", "--run-dir", "p"]);
    ok(d, &["finetune", "--config", "small.json", "--data", "data/train.jsonl", "--arm", "bert", "--run-dir", "f"]);
    ok(d, &["loss-curves", "p", "f", "--run-dir", "merged"]);
    let text = String::from_utf8(read(d, "merged/loss_curves.csv")).unwrap();
    assert!(text.starts_with("epoch,step,loss_clean,loss_adv,loss_total,variant\n"));
    assert!(text.contains(",pretrain_wwm\n") && text.contains(",bert\n"));

    std::fs::create_dir(d.join("broken")).unwrap();
    std::fs::write(d.join("broken/loss.csv"), "not,a,loss,log\n").unwrap();
    let out = atwwm(d, &["loss-curves", "p", "broken"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken"));
}

#[test]
fn errors_are_json_with_exit_codes() {
    let dir = setup();
    let d = dir.path();
    let cases: [(&[&str], i32); 5] = [
        (&["evaluate", "--checkpoint", "missing.atwm", "--data", "data/test.jsonl"], 2),
        (&["finetune", "--data", "data/train.jsonl", "--epsilon", "0"], 2),
        (&["finetune", "--data", "data/train.jsonl", "--epsilon", "-1", "--no-adv"], 2),
        (&["pretrain"], 2),
        (&["no-such-command"], 2),
    ];
    for (args, code) in cases {
        let out = atwwm(d, args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
    }
    let out = atwwm(d, &["pretrain", "--data", "missing.jsonl"]);
    let line: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["code"], 2);
    assert!(line["message"].as_str().unwrap().contains("missing.jsonl"));

    std::fs::write(d.join("garbage.atwm"), b"ATWMxxxx").unwrap();
    std::fs::copy(d.join("data/train.jsonl"), d.join("t.jsonl")).unwrap();
    std::fs::write(d.join("vocab.tsv"), "").unwrap();
    let out = atwwm(d, &["evaluate", "--checkpoint", "garbage.atwm", "--data", "t.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn mask_demo_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["mask-demo", "--text", "这台凯美瑞的发动机很安静", "--seed", "2"]);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| Approach")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].contains("这台凯美瑞的发动机很安静"));
    assert_eq!(out, ok(dir.path(), &["mask-demo", "--text", "这台凯美瑞的发动机很安静", "--seed", "2"]));
}
