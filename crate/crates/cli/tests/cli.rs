use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bridgeseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bridgeseg"))
        .args(args)
        .env_remove("BRIDGESEG_NUM_WORKERS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bridgeseg(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "epochs": 3,
  "lr": 0.001,
  "schedule": {"times": [0.0, 0.5, 1.0], "tau": 0.01},
  "generator": {"base_channels": 4, "n_res_blocks": 1, "time_features": 4, "time_hidden": 8},
  "discriminator": {"base_channels": 4, "time_features": 4},
  "seg": {"depth": 2, "base_channels": 4},
  "checkpoint_every": 1
}"#;

/// Train and test phantoms plus a tiny config in `root`.
fn fixture(root: &Path) {
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--subjects",
        "2",
        "--slices",
        "2",
        "--size",
        "32",
        "--split",
        "train",
        "--out",
        p(&root.join("train")),
    ]);
    ok(&[
        "gen-data",
        "--seed",
        "3",
        "--subjects",
        "2",
        "--slices",
        "2",
        "--size",
        "32",
        "--first-subject",
        "2",
        "--out",
        p(&root.join("test")),
    ]);
    fs::write(root.join("tiny.json"), TINY).unwrap();
}

#[test]
fn gen_data_writes_manifest_and_rasters() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let line = ok(&["gen-data", "--seed", "7", "--subjects", "4", "--out", p(&out)]);
    assert!(line.contains("wrote 32 slices"), "{line}");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 32);
    for e in entries {
        assert!(out.join(e["image"].as_str().unwrap()).exists());
    }
}

#[test]
fn silver_masks_replace_exact_ones() {
    let dir = tempfile::tempdir().unwrap();
    let (exact, silver) = (dir.path().join("e"), dir.path().join("s"));
    ok(&[
        "gen-data",
        "--seed",
        "2",
        "--subjects",
        "1",
        "--slices",
        "2",
        "--out",
        p(&exact),
    ]);
    ok(&[
        "gen-data",
        "--seed",
        "2",
        "--subjects",
        "1",
        "--slices",
        "2",
        "--silver-atlases",
        "5",
        "--out",
        p(&silver),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(silver.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["generator_params"]["silver_atlases"], 5);
    let masks: Vec<&str> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter_map(|e| e["mask"].as_str())
        .collect();
    assert!(!masks.is_empty());
    assert!(masks
        .iter()
        .any(|m| fs::read(exact.join(m)).unwrap() != fs::read(silver.join(m)).unwrap()));
}

#[test]
fn train_then_evaluate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root);
    let config = root.join("tiny.json");
    for run in ["a", "b"] {
        // the flag overrides the file's 3 epochs
        ok(&[
            "train",
            "--data",
            p(&root.join("train")),
            "--config",
            p(&config),
            "--mode",
            "e2e",
            "--epochs",
            "1",
            "--seed",
            "4",
            "--out",
            p(&root.join(run)),
        ]);
    }
    let log = |run: &str| fs::read(root.join(run).join("e2e_loss.csv")).unwrap();
    assert_eq!(log("a"), log("b"));
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("a/experiment.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["epochs"], 1);
    assert_eq!(record["checkpoints"].as_array().unwrap().len(), 1);
    let ckpt = record["checkpoints"][0].as_str().unwrap().to_string();

    for report in ["ra", "rb"] {
        let line = ok(&[
            "evaluate",
            "--checkpoint",
            &ckpt,
            "--data",
            p(&root.join("test")),
            "--passes",
            "3",
            "--seed",
            "1",
            "--out",
            p(&root.join(report)),
        ]);
        assert!(line.contains("DSC"), "{line}");
        assert!(root.join(report).join("summary.json").exists());
    }
    let csv = |report: &str| fs::read(root.join(report).join("metrics.csv")).unwrap();
    assert_eq!(csv("ra"), csv("rb"));

    ok(&[
        "translate",
        "--checkpoint",
        &ckpt,
        "--data",
        p(&root.join("test")),
        "--out",
        p(&root.join("synth")),
    ]);
    let synth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("synth/manifest.json")).unwrap()).unwrap();
    assert!(synth["entries"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["domain"] == "SYNTH_CT"));

    ok(&[
        "segment",
        "--checkpoint",
        &ckpt,
        "--data",
        p(&root.join("synth")),
        "--passes",
        "2",
        "--out",
        p(&root.join("seg")),
    ]);
    let table = fs::read_to_string(root.join("seg/predictions.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 4);

    let line = ok(&[
        "report",
        "--run",
        &format!("a={}", p(&root.join("ra"))),
        "--run",
        &format!("b={}", p(&root.join("rb"))),
        "--out",
        p(&root.join("cmp")),
    ]);
    assert!(line.contains("compared 2 runs"), "{line}");
    assert!(root.join("cmp/comparisons.json").exists());
}

#[test]
fn two_stage_mode_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root);
    let line = ok(&[
        "train",
        "--data",
        p(&root.join("train")),
        "--config",
        p(&root.join("tiny.json")),
        "--mode",
        "two-stage",
        "--epochs",
        "1",
        "--seg-epochs",
        "1",
        "--out",
        p(&root.join("two")),
    ]);
    assert!(line.contains("TwoStage"), "{line}");
    assert!(root.join("two/segmentation_loss.csv").exists());
}

#[test]
fn evaluate_names_a_missing_mask_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fixture(root);
    ok(&[
        "train",
        "--data",
        p(&root.join("train")),
        "--config",
        p(&root.join("tiny.json")),
        "--epochs",
        "1",
        "--out",
        p(&root.join("run")),
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("test/manifest.json")).unwrap()).unwrap();
    let mask = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find_map(|e| e["mask"].as_str())
        .unwrap()
        .to_string();
    fs::remove_file(root.join("test").join(&mask)).unwrap();
    let ckpt = root.join("run/checkpoints/epoch_001.ckpt");
    let out = bridgeseg(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&root.join("test")),
        "--out",
        p(&root.join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&mask), "{stderr}");
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        &["frobnicate"][..],
        &["gen-data"],
        &["gen-data", "--out", "x", "--bogus", "1"],
        &["train", "--data", "d"],
        &["report", "--out", "x"],
        &["report", "--run", "noequals", "--out", "x"],
    ] {
        assert_eq!(bridgeseg(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn every_subcommand_documents_its_flags() {
    for (cmd, flags) in [
        (
            "gen-data",
            &["--out", "--seed", "--subjects", "--slices", "--size", "--split"][..],
        ),
        (
            "train",
            &["--data", "--out", "--config", "--mode", "--epochs", "--lr", "--seed"],
        ),
        ("translate", &["--checkpoint", "--data", "--out", "--seed"]),
        (
            "segment",
            &["--checkpoint", "--passes", "--dropout-rate", "--threshold"],
        ),
        ("evaluate", &["--checkpoint", "--data", "--out", "--passes", "--seed"]),
        ("report", &["--run", "--out"]),
    ] {
        let help = ok(&[cmd, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = bridgeseg(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = Command::new(env!("CARGO_BIN_EXE_bridgeseg"))
        .args(["gen-data", "--out", p(&dir.path().join("g"))])
        .env("BRIDGESEG_NUM_WORKERS", "none")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BRIDGESEG_NUM_WORKERS"));
}
