use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
corpus.columns_per_label = 6
base.columns_per_label = 3
base.epochs = 1
base.d_model = 16
base.d_ff = 32
base.context_length = 128
epochs = 1
rank = 4
";

fn ctalab(out: &Path, args: &[&str]) -> Output {
    let conf = out.join("tiny.conf");
    if !conf.exists() {
        fs::create_dir_all(out).unwrap();
        fs::write(&conf, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ctalab"))
        .env("CTALAB_OUT", out)
        .arg("--quiet")
        .arg("--config")
        .arg(&conf)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = ctalab(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&ctalab(dir.path(), &["experiment", "table-9"])), 2);
    assert_eq!(code(&ctalab(dir.path(), &["--set", "bogus=1", "generate"])), 2);
    assert_eq!(code(&ctalab(dir.path(), &["--set", "lr=fast", "generate"])), 2);
    assert_eq!(code(&ctalab(dir.path(), &["frobnicate"])), 2);
}

#[test]
fn stages_chain_and_name_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&ctalab(out, &["build"])), 1, "build before generate");
    ok(out, &["generate"]);
    assert!(out.join("corpus/manifest.txt").exists());

    let ds = ok(out, &["build", "--templates", "p3", "--fraction", "0.02"]);
    assert!(ds.trim().ends_with("toy-0.02-LoRA3-s42.jsonl"), "{ds}");
    assert_eq!(code(&ctalab(out, &["build", "--templates", "p9"])), 2);
    assert_eq!(code(&ctalab(out, &["build", "--fraction", "1.5"])), 2);

    let ds = ok(out, &["build", "--templates", "p1,p2,p3", "--fraction", "0.5"]);
    let ckpt = ok(out, &["train", "--dataset", ds.trim(), "--mode", "sft"]);
    assert!(ckpt.contains("toy-0.5-SFT123-s42"), "{ckpt}");
    let log = fs::read_to_string(Path::new(ckpt.trim()).parent().unwrap().join("train.log")).unwrap();
    assert!(log.contains("epoch 1 loss"), "{log}");

    ok(out, &["eval", "--checkpoint", ckpt.trim(), "--templates", "p3,p4,p5"]);
    let reports = out.join("reports/toy-0.5-SFT123-s42");
    for t in ["p3", "p4", "p5"] {
        assert!(reports.join(format!("{t}.json")).exists());
    }
    let sens = fs::read_to_string(reports.join("sensitivity.json")).unwrap();
    assert!(sens.contains("\"spread\""));
    assert!(sens.contains("\"fingerprint\""));
    assert!(reports.join("sensitivity.csv").exists());

    // a dataset edited after it was built no longer matches its metadata
    let mut text = fs::read_to_string(ds.trim()).unwrap();
    text.push('\n');
    fs::write(ds.trim(), text).unwrap();
    assert_eq!(code(&ctalab(out, &["train", "--dataset", ds.trim()])), 1);

    // regenerating with other settings invalidates the chain
    fs::write(out.join("other.conf"), format!("{TINY}corpus.seed = 5\n")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ctalab"))
        .env("CTALAB_OUT", out)
        .args(["-q", "--config"])
        .arg(out.join("other.conf"))
        .args(["eval", "--checkpoint", ckpt.trim()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn experiment_reports_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for out in [a.path(), b.path()] {
        ok(out, &["generate"]);
        let table = ok(out, &["experiment", "thirds"]);
        assert!(table.contains("toy-1-LoRA3") && table.contains("toy-0.333-LoRA123"), "{table}");
    }
    for f in ["result.json", "table.txt", "toy-1-LoRA3.json", "toy-0.333-LoRA123.csv"] {
        let x = fs::read(a.path().join("experiments/thirds").join(f)).unwrap();
        let y = fs::read(b.path().join("experiments/thirds").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
    let result = fs::read_to_string(a.path().join("experiments/thirds/result.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&result).unwrap();
    let prompts: Vec<u64> = v["runs"].as_array().unwrap().iter().map(|r| r["train_prompts"].as_u64().unwrap()).collect();
    assert_eq!(prompts.len(), 4);
    assert!(prompts.iter().all(|p| *p == prompts[0]), "{prompts:?}");
}
