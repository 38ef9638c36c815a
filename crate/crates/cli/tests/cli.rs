use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"{
  "corpus": {"speakers": 4, "utterances_per_speaker": 3, "utterance_secs": 2.5},
  "test_corpus": {"speakers": 3, "utterances_per_speaker": 2, "utterance_secs": 2.5},
  "epochs": 2,
  "batch_size": 4,
  "crop_secs": 1.0,
  "noise_clips_per_class": 1,
  "model": {"hidden": 16, "attention": 8, "representation": 16, "projector_hidden": 16, "embedding": 16},
  "eval": {"num_frames": 2, "frame_secs": 1.0}
}"#;

fn mcsv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcsv"))
        .args(args)
        .env_remove("MC_SEED")
        .output()
        .unwrap()
}

fn mcsv_ok(args: &[&str]) -> String {
    let out = mcsv(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn workspace() -> Workspace {
    let dir = TempDir::new().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    mcsv_ok(&["gen-data", "--config", s(&config), "--data", s(&data)]);
    Workspace {
        _dir: dir,
        root,
        config,
        data,
    }
}

fn train(ws: &Workspace, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--config",
        s(&ws.config),
        "--data",
        s(&ws.data),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    mcsv_ok(&args)
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let k = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| l.split(',').nth(k).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn gen_data_writes_manifests_and_is_deterministic() {
    let ws = workspace();
    let manifest = fs::read_to_string(ws.data.join("train/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 12);
    assert_eq!(
        fs::read_to_string(ws.data.join("test/manifest.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 6
    );
    let trials = fs::read_to_string(ws.data.join("test/trials.txt")).unwrap();
    assert_eq!(trials.lines().count(), 15);
    assert_eq!(trials.lines().filter(|l| l.starts_with('1')).count(), 3);

    let again = ws.root.join("again");
    mcsv_ok(&["gen-data", "--config", s(&ws.config), "--data", s(&again)]);
    for f in [
        "train/manifest.csv",
        "train/wav/spk000/spk000-utt000.wav",
        "test/trials.txt",
    ] {
        let (a, b) = (ws.data.join(f), again.join(f));
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_into_an_unwritable_location_fails_without_a_manifest() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "not a directory").unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let target = blocker.join("data");
    let out = mcsv(&["gen-data", "--config", s(&config), "--data", s(&target)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!target.join("train/manifest.csv").exists());
}

#[test]
fn am_margin_ramps_to_its_final_value_by_half_way() {
    let ws = workspace();
    let run = ws.root.join("am");
    train(&ws, &run, &["--loss", "am", "--margin", "0.4"]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let margin = column(&csv, "margin");
    assert_eq!(margin.len(), 6);
    assert_eq!(margin[0], 0.0);
    assert!(margin.windows(2).all(|w| w[1] >= w[0]));
    assert!(margin[3..].iter().all(|&m| (m - 0.4).abs() < 1e-12));
    assert!(margin[1] > 0.0 && margin[1] < 0.4);

    let snapshot = fs::read_to_string(run.join("config.json")).unwrap();
    assert!(snapshot.contains("\"snt_xent_am\""));
    let hash = fs::read_to_string(run.join("config.sha256")).unwrap();
    assert_eq!(hash.trim().len(), 64);
    assert!(run.join("checkpoints/epoch_002.ckpt").exists());
}

#[test]
fn disabling_augmentation_is_recorded() {
    let ws = workspace();
    let run = ws.root.join("clean");
    train(&ws, &run, &["--no-augment", "--epochs", "1"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(summary["augment_enabled"], false);
    assert_eq!(summary["epochs_completed"], 1);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let ws = workspace();
    let straight = ws.root.join("straight");
    train(&ws, &straight, &["--epochs", "3"]);

    let split = ws.root.join("split");
    train(&ws, &split, &["--epochs", "3"]);
    let first = split.join("checkpoints/epoch_001.ckpt");
    train(&ws, &split, &["--epochs", "3", "--resume", s(&first)]);

    for f in ["metrics.csv", "model.ckpt", "config.sha256"] {
        assert_eq!(
            fs::read(straight.join(f)).unwrap(),
            fs::read(split.join(f)).unwrap(),
            "{f}"
        );
    }
    let other = ws.root.join("other");
    let out = mcsv(&[
        "train",
        "--config",
        s(&ws.config),
        "--data",
        s(&ws.data),
        "--out",
        s(&other),
        "--epochs",
        "3",
        "--tau",
        "0.3",
        "--resume",
        s(&first),
    ]);
    assert!(!out.status.success());
}

#[test]
fn evaluation_writes_scores_and_rejects_empty_trial_lists() {
    let ws = workspace();
    let run = ws.root.join("run");
    train(&ws, &run, &["--epochs", "1"]);
    let stdout = mcsv_ok(&["evaluate", "--run", s(&run), "--data", s(&ws.data)]);
    assert!(stdout.contains("EER"));
    assert!(stdout.contains("minDCF"));
    let scores = fs::read_to_string(run.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 15);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let eer = summary["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer));

    let noisy = ws.root.join("noisy");
    mcsv_ok(&[
        "evaluate",
        "--run",
        s(&run),
        "--data",
        s(&ws.data),
        "--noisy",
        "--out",
        s(&noisy),
    ]);
    assert_ne!(
        fs::read_to_string(noisy.join("scores.csv")).unwrap(),
        scores
    );

    let stats = mcsv_ok(&["score-stats", "--scores", s(&run.join("scores.csv"))]);
    assert!(stats.contains("gap"));
    assert!(stats.contains("bin_left,pos_count,neg_count"));

    let empty = ws.root.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = mcsv(&[
        "evaluate",
        "--run",
        s(&run),
        "--data",
        s(&ws.data),
        "--trials",
        s(&empty),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn losscheck_passes_and_catches_an_injected_fault() {
    let out = mcsv_ok(&["losscheck", "--batch-size", "4"]);
    assert_eq!(out.matches("PASS").count(), 6);
    let bad = mcsv(&[
        "losscheck",
        "--batch-size",
        "4",
        "--inject-fault",
        "am-sign-flip",
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let table = String::from_utf8_lossy(&bad.stdout);
    assert!(table
        .lines()
        .filter(|l| l.starts_with("SNT-Xent-AM "))
        .all(|l| l.ends_with("FAIL")));
    let one = mcsv(&["losscheck", "--batch-size", "1"]);
    assert_eq!(one.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&one.stderr).contains("at least 2"));
}

#[test]
fn configuration_errors_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epoch": 3}"#).unwrap();
    let out = mcsv(&["gen-data", "--config", s(&bad), "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));
    assert_eq!(mcsv(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(mcsv(&["evaluate"]).status.code(), Some(1));
    assert_eq!(mcsv(&["--help"]).status.code(), Some(0));
}

#[test]
fn seed_environment_variable_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let gen = |seed: &str, sub: &str| {
        let data = dir.path().join(sub);
        let out = Command::new(env!("CARGO_BIN_EXE_mcsv"))
            .args(["gen-data", "--config", s(&config), "--data", s(&data)])
            .env("MC_SEED", seed)
            .output()
            .unwrap();
        (out.status.code(), data)
    };
    let (code, a) = gen("7", "a");
    assert_eq!(code, Some(0));
    let (_, b) = gen("7", "b");
    let (_, c) = gen("8", "c");
    let wav = "train/wav/spk000/spk000-utt000.wav";
    assert_eq!(
        fs::read(a.join(wav)).unwrap(),
        fs::read(b.join(wav)).unwrap()
    );
    assert_ne!(
        fs::read(a.join(wav)).unwrap(),
        fs::read(c.join(wav)).unwrap()
    );
    assert_eq!(gen("seven", "d").0, Some(1));
}
