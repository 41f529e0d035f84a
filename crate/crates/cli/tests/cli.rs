use std::path::Path;
use std::process::{Command, Output};

fn gsp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GSP_DATA_ROOT")
        .output()
        .expect("gsp runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn toy_config(dir: &Path, max_steps: u64) {
    let repo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(repo).unwrap()).unwrap();
    cfg["io"]["max_steps"] = max_steps.into();
    std::fs::write(dir.join("toy.json"), cfg.to_string()).unwrap();
}

fn ingested(dir: &Path) {
    std::fs::create_dir_all(dir.join("work")).unwrap();
    ok(&gsp(&["phantoms", "--out", "work/phantoms", "--per-class", "2", "--seed", "3"], dir));
    ok(&gsp(&["ingest", "--config", "toy.json", "--out", "work/data"], dir));
}

#[test]
fn ingest_prints_counts_and_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), 1);
    ingested(dir.path());
    let table = ok(&gsp(&["ingest", "--config", "toy.json", "--out", "work/again"], dir.path()));
    assert!(table.contains("Glioma") && table.contains("No tumor"), "{table}");
    for name in ["train.json", "test.json"] {
        let a = std::fs::read(dir.path().join("work/data").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("work/again").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn unknown_config_keys_exit_2_with_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"data": {"tumour_slices": 3}, "learning_rate": 1}"#).unwrap();
    let out = gsp(&["ingest", "--config", "bad.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(v["error"], "config");
    let msg = v["message"].as_str().unwrap();
    assert!(msg.contains("data.tumour_slices") && msg.contains("learning_rate"), "{msg}");
}

#[test]
fn too_many_tumor_slices_names_the_case() {
    let dir = tempfile::tempdir().unwrap();
    toy_config(dir.path(), 1);
    std::fs::create_dir_all(dir.path().join("work")).unwrap();
    ok(&gsp(&["phantoms", "--out", "work/phantoms", "--per-class", "1"], dir.path()));
    let out = gsp(&["ingest", "--config", "toy.json", "--out", "o", "--tumor-k", "40"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("glioma-000") || err.contains("meningioma-000"), "{err}");
}

#[test]
fn missing_config_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gsp(&["pretrain", "--config", "nope.json", "--out", "o"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stderr).unwrap().contains("nope.json"));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_config(d, 3);
    ingested(d);

    let table = ok(&gsp(&["pretrain", "--config", "toy.json", "--out", "work/pretrain"], d));
    assert!(table.contains("PSNR") || table.contains("psnr"), "{table}");
    assert!(d.join("work/pretrain/generator.gspckpt").exists());

    let resumed = gsp(
        &["pretrain", "--config", "toy.json", "--out", "work/pretrain2", "--resume", "work/pretrain/generator.gspckpt"],
        d,
    );
    ok(&resumed);

    let msg = ok(&gsp(
        &["synthesize", "--ckpt", "work/pretrain/generator.gspckpt", "--manifest", "work/data/train.json", "--out", "work/augmented"],
        d,
    ));
    assert!(msg.contains("synthetic slices"), "{msg}");

    let scores = ok(&gsp(&["evaluate", "--ckpt", "work/pretrain/generator.gspckpt", "--manifest", "work/data/test.json", "--task", "synth"], d));
    assert!(!scores.is_empty());

    let report = ok(&gsp(
        &["finetune", "--config", "toy.json", "--init", "work/pretrain/generator.gspckpt", "--out", "work/finetune"],
        d,
    ));
    assert!(report.contains("acc"), "{report}");
    ok(&gsp(&["finetune", "--config", "toy.json", "--init", "fresh", "--out", "work/fresh"], d));

    let json_out = d.join("work/eval.json");
    ok(&gsp(
        &[
            "evaluate",
            "--ckpt",
            "work/finetune/classifier.gspckpt",
            "--manifest",
            "work/data/test.json",
            "--task",
            "classify",
            "--out",
            json_out.to_str().unwrap(),
        ],
        d,
    ));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert!(v["accuracy"].is_number());

    let bad = gsp(&["finetune", "--config", "toy.json", "--init", "work/finetune/classifier.gspckpt", "--out", "o"], d);
    assert_eq!(bad.status.code(), Some(3));

    let log = d.join("work/finetune/finetune_log.json");
    let log = log.to_str().unwrap();
    for format in ["table", "json", "csv"] {
        assert!(!ok(&gsp(&["report", "--runlog", log, "--format", format], d)).is_empty());
    }
}
