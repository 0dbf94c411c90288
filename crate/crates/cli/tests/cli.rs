use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.yaml")
}

fn plgmi(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plgmi"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("PLG_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

#[test]
fn invert_without_generator_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    ok(&plgmi(dir.path(), &["--config", cfg, "train-target"]));
    let out = plgmi(dir.path(), &["--config", cfg, "invert"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-gan"), "{err}");
    // selection is the GAN's missing input
    let out = plgmi(dir.path(), &["--config", cfg, "train-gan"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`select`"));
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = plgmi(dir.path(), &["train-target"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "run_id: x\nseed: 1\nbogus: 3\n").unwrap();
    let out = plgmi(dir.path(), &["--config", bad.to_str().unwrap(), "show"]);
    assert_eq!(out.status.code(), Some(2));
    let out = plgmi(dir.path(), &["--config", toy_config().to_str().unwrap(), "ablate", "--axis", "lr"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn select_override_sets_entries_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    ok(&plgmi(dir.path(), &["--config", cfg, "train-target"]));
    ok(&plgmi(dir.path(), &["--config", cfg, "select", "--n", "5"]));
    let sel: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("runs/selection/toy/selection.json")).unwrap()).unwrap();
    let classes = sel["classes"].as_array().expect("classes array");
    assert_eq!(classes.len(), 2);
    for c in classes {
        assert_eq!(c["indices"].as_array().unwrap().len(), 5);
    }
    // the written manifest records the override
    let written = std::fs::read_to_string(dir.path().join("runs/manifests/toy.yaml")).unwrap();
    assert!(written.contains("n: 5"), "{written}");
}

#[test]
fn pipeline_reruns_are_no_ops_and_replays_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    let first = ok(&plgmi(dir.path(), &["--config", cfg, "run"]));
    assert!(first.contains("evaluate: done"), "{first}");
    let report = dir.path().join("runs/reports/toy/report.json");
    let before = std::fs::read(&report).unwrap();

    let again = ok(&plgmi(dir.path(), &["--config", cfg, "run"]));
    for stage in ["train-target", "train-eval", "select", "train-gan", "invert", "evaluate"] {
        assert!(again.contains(&format!("{stage}: up to date")), "{again}");
    }
    assert_eq!(std::fs::read(&report).unwrap(), before);

    let forced = ok(&plgmi(dir.path(), &["--config", cfg, "--force", "evaluate"]));
    assert!(forced.contains("evaluate: done"));
    assert_eq!(std::fs::read(&report).unwrap(), before);

    // replay from the manifest the run wrote, into a fresh artifact root
    let saved = dir.path().join("runs/manifests/toy.yaml");
    ok(&plgmi(dir.path(), &["--config", saved.to_str().unwrap(), "--out-dir", "replay", "run"]));
    assert_eq!(std::fs::read(dir.path().join("replay/reports/toy/report.json")).unwrap(), before);

    // a different seed is a different run
    ok(&plgmi(dir.path(), &["--config", cfg, "--seed", "8", "--out-dir", "seeded", "run"]));
    assert_ne!(std::fs::read(dir.path().join("seeded/reports/toy/report.json")).unwrap(), before);
}

#[test]
fn single_value_sweep_matches_the_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let cfg = cfg.to_str().unwrap();
    ok(&plgmi(dir.path(), &["--config", cfg, "run"]));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("runs/reports/toy/report.json")).unwrap()).unwrap();
    ok(&plgmi(dir.path(), &["--config", cfg, "ablate", "--axis", "m", "--values", "2"]));
    let csv = std::fs::read_to_string(dir.path().join("runs/ablations/toy/m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "value,attack_acc,fid,error");
    assert_eq!(lines.len(), 2);
    let acc: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(acc, report["selected"]["attack_acc_top1"]["mean"].as_f64().unwrap());

    // a changed value gets its own run that reuses the generator
    ok(&plgmi(dir.path(), &["--config", cfg, "ablate", "--axis", "m", "--values", "1"]));
    assert!(dir.path().join("runs/reports/toy--m-1/report.json").exists());
    assert!(!dir.path().join("runs/checkpoints/toy--m-1").exists());
}
