use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ldhnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldhnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&ldhnet(&[])), 1);
    assert_eq!(code(&ldhnet(&["train"])), 1);
    assert_eq!(code(&ldhnet(&["synth", "--out", "x", "--n-patients", "many"])), 1);
    assert_eq!(code(&ldhnet(&["--help"])), 0);
}

#[test]
fn synth_writes_manifest_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let o = ldhnet(&["synth", "--out", s(d), "--n-patients", "20", "--prevalence", "0.5", "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest.as_array().unwrap();
    assert_eq!(entries.len(), 20);
    assert_eq!(entries.iter().filter(|e| e["label"] == "ldh").count(), 10);
    let images: Vec<_> = fs::read_dir(a.join("images")).unwrap().collect();
    assert_eq!(images.len(), 60);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    for e in fs::read_dir(a.join("images")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(
            fs::read(a.join("images").join(&name)).unwrap(),
            fs::read(b.join("images").join(&name)).unwrap()
        );
    }
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let o = ldhnet(&["eval", "--manifest", s(&missing), "--checkpoint", "x", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"[{"patient_id": "p1", "group_marker": "g1", "label": "ldh", "images": {"t1_sag": "a.pgm"}}]"#)
        .unwrap();
    let o = ldhnet(&["train", "--manifest", s(&bad), "--out", s(&dir.path().join("run"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("p1"));
}

#[test]
fn invalid_settings_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&ldhnet(&["synth", "--out", s(&data), "--n-patients", "10", "--size", "16"])), 0);
    let manifest = data.join("manifest.json");
    let o = ldhnet(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("r")), "--reduction-r", "5"]);
    assert_eq!(code(&o), 1);
    let o = ldhnet(&["train", "--manifest", s(&manifest), "--out", s(&dir.path().join("r")), "--batch-size", "1"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let report = dir.path().join("report");
    assert_eq!(code(&ldhnet(&["synth", "--out", s(&data), "--n-patients", "12", "--size", "32", "--seed", "1"])), 0);
    let manifest = data.join("manifest.json");
    let o = ldhnet(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--epochs",
        "2",
        "--folds",
        "3",
        "--fold-index",
        "1",
        "--aug-multiplier",
        "2",
        "--cardinality",
        "2",
        "--base-channels",
        "8",
        "--reduction-r",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let config: serde_json::Value = serde_json::from_slice(&fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(config["aug_multiplier"], 2);
    let log = fs::read_to_string(run.join("fold1/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,val_auc\n"));
    assert!(run.join("fold1/last.ckpt").exists());

    let ckpt = run.join("fold1/last.ckpt");
    let o = ldhnet(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(report.join("metrics.json")).unwrap()).unwrap();
    for k in ["ACC", "AUC", "F1", "Precision", "Recall", "AUPRC"] {
        assert!(metrics[k].is_number(), "{k}");
    }
    assert!(fs::read_to_string(report.join("roc.csv")).unwrap().starts_with("threshold,fpr,tpr\n"));
    assert!(fs::read_to_string(report.join("pr.csv")).unwrap().starts_with("threshold,recall,precision\n"));

    let first = fs::read(report.join("metrics.json")).unwrap();
    assert_eq!(code(&ldhnet(&["eval", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&report)])), 0);
    assert_eq!(fs::read(report.join("metrics.json")).unwrap(), first);

    // checkpoint trained on 32×32 images cannot score 16×16 ones
    let small = dir.path().join("small");
    assert_eq!(code(&ldhnet(&["synth", "--out", s(&small), "--n-patients", "6", "--size", "16"])), 0);
    let o = ldhnet(&[
        "eval",
        "--manifest",
        s(&small.join("manifest.json")),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&report),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn augment_preview_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&ldhnet(&["synth", "--out", s(&data), "--n-patients", "4", "--size", "16"])), 0);
    let out = dir.path().join("preview");
    let o = ldhnet(&["augment-preview", "--manifest", s(&data.join("manifest.json")), "--out", s(&out), "--count", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 10);
}
