mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mosbench::checkpoint::{load_checkpoint, Predictor};
use mosbench::data::{compute_utterance_mos, load_ratings, SplitTag};
use mosbench::features::{build_vocab, FeatureConfig};
use mosbench::model::{Model, ModelConfig};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mosbench")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = run(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, config: &str) -> PathBuf {
    let cfg = dir.join("sim.cfg");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join("sim");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    out
}

const SMALL: &str = "n_systems = 12\nutterances_per_system = 12\nembed_dim = 8\nframes_range = 3, 6\ntest_per_system = 3\n";

/// Rows of a report or ablation CSV as header -> value maps.
fn csv_rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().clone();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            header.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect()
        })
        .collect()
}

fn num(row: &std::collections::HashMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

#[test]
fn simulate_writes_expected_layout() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), SMALL);
    for f in ["ratings.csv", "train.csv", "test.csv", "ground_truth.csv", "baseline_mos.csv", "run_manifest.txt"] {
        assert!(sim.join(f).is_file(), "{f}");
    }
    assert!(!sim.join("validation.csv").exists());
    assert_eq!(std::fs::read_dir(sim.join("embeddings")).unwrap().count(), 144);
    let test = compute_utterance_mos(&load_ratings(sim.join("test.csv"), SplitTag::Test).unwrap());
    assert_eq!(test.len(), 36);
}

#[test]
fn malformed_config_exits_two_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    for (text, field) in [
        ("sigma_utterance = -1\n", "sigma_utterance"),
        ("n_systems = many\n", "n_systems"),
        ("frames_per_utt = 3\n", "frames_per_utt"),
        ("system_mean_range = 4.5, 1.5\n", "system_mean_range"),
    ] {
        let cfg = dir.path().join("bad.cfg");
        std::fs::write(&cfg, text).unwrap();
        let (c, err) = code(&["simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
        assert_eq!(c, 2, "{text}: {err}");
        assert!(err.contains(field), "{text}: {err}");
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), SMALL);
    let out = dir.path().join("t");
    let (c, err) = code(&["train", "--data", s(&sim), "--out", s(&out), "--blind-rater"]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("rater"), "{err}");
    assert_eq!(code(&["train", "--data", s(&sim)]).0, 2);
    assert_eq!(code(&["frobnicate"]).0, 2);

    std::fs::remove_file(sim.join("baseline_mos.csv")).unwrap();
    let (c, err) = code(&["train", "--data", s(&sim), "--out", s(&out), "--baseline-mos"]);
    assert_eq!(c, 2, "{err}");
    std::fs::remove_dir_all(sim.join("embeddings")).unwrap();
    assert_eq!(code(&["train", "--data", s(&sim), "--out", s(&out), "--w2v"]).0, 2);
}

#[test]
fn bad_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), SMALL);
    let ratings = std::fs::read_to_string(sim.join("train.csv")).unwrap();
    let mut lines: Vec<String> = ratings.lines().map(String::from).collect();
    let last = lines.pop().unwrap();
    lines.push(format!("{},9", last.rsplit_once(',').unwrap().0));
    std::fs::write(sim.join("train.csv"), lines.join("\n")).unwrap();
    let (c, err) = code(&["train", "--data", s(&sim), "--out", s(&dir.path().join("t")), "--system"]);
    assert_eq!(c, 3, "{err}");

    let ckpt = dir.path().join("junk.ckpt");
    std::fs::write(&ckpt, b"MBCKPT\0garbage").unwrap();
    let (c, err) = code(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&sim), "--out", s(&dir.path().join("e"))]);
    assert_eq!(c, 3, "{err}");
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), SMALL);
    let out = dir.path().join("t");
    ok(&["train", "--data", s(&sim), "--out", s(&out), "--system", "--rater", "--epochs", "0", "--seed", "9"]);
    let Predictor::Network(model) = load_checkpoint(out.join("model.ckpt")).unwrap() else {
        panic!("expected a network checkpoint");
    };
    let train = compute_utterance_mos(&load_ratings(sim.join("train.csv"), SplitTag::Train).unwrap());
    let features = FeatureConfig { unknown_dropout_p: model.features.unknown_dropout_p, ..FeatureConfig::default() };
    let features = FeatureConfig { use_system: true, use_rater: true, ..features };
    let init = Model::init(ModelConfig { seed: 9, ..ModelConfig::default() }, features, build_vocab(&train).unwrap()).unwrap();
    assert_eq!(*model, init);
}

#[test]
fn system_only_model_ranks_held_in_utterances() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "n_systems = 20\nutterances_per_system = 20\nembed_dim = 4\nframes_range = 1, 2\n");
    let out = dir.path().join("t");
    ok(&["train", "--data", s(&sim), "--out", s(&out), "--system"]);
    let ev = dir.path().join("e");
    ok(&["evaluate", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&sim), "--split", "train", "--out", s(&ev)]);
    let rows = csv_rows(&ev.join("report.csv"));
    assert!(num(&rows[0], "utt_srcc") > 0.5, "{:?}", rows[0]);
    assert!(ev.join("predictions.csv").is_file() && ev.join("report.txt").is_file());
}

#[test]
fn blinding_and_aggregation_flags_change_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(
        dir.path(),
        "n_systems = 20\nutterances_per_system = 40\nsigma_group_bias = 0.8\nembed_dim = 4\nframes_range = 1, 2\n\
         test_per_system = 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 20, 20, 3, 3, 3, 3, 3, 3, 3, 3\n",
    );
    let out = dir.path().join("t");
    ok(&["train", "--data", s(&sim), "--out", s(&out), "--system", "--rater"]);
    let ckpt = out.join("model.ckpt");
    let report = |extra: &[&str], name: &str| {
        let ev = dir.path().join(name);
        let mut args = vec!["evaluate", "--checkpoint", s(&ckpt), "--data", s(&sim), "--out", s(&ev)];
        args.extend_from_slice(extra);
        ok(&args);
        csv_rows(&ev.join("report.csv")).remove(0)
    };
    let open = report(&[], "open");
    let blind = report(&["--blinded"], "blind");
    let weighted = report(&["--aggregation", "weighted"], "weighted");
    assert!(num(&open, "utt_mse") < num(&blind, "utt_mse"), "{open:?} {blind:?}");
    assert_ne!(num(&open, "sys_mse"), num(&weighted, "sys_mse"));
    assert_eq!(open["sys_srcc"], weighted["sys_srcc"]);
    assert_eq!(weighted["aggregation"], "weighted");
}

#[test]
fn unseen_raters_can_be_filtered() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), &format!("{SMALL}unseen_rater_groups = 2\n"));
    let out = dir.path().join("t");
    ok(&["train", "--data", s(&sim), "--out", s(&out), "--rater", "--epochs", "2"]);
    let ckpt = out.join("model.ckpt");
    let n = |extra: &[&str], name: &str| {
        let ev = dir.path().join(name);
        let mut args = vec!["evaluate", "--checkpoint", s(&ckpt), "--data", s(&sim), "--out", s(&ev)];
        args.extend_from_slice(extra);
        ok(&args);
        num(&csv_rows(&ev.join("report.csv"))[0], "n_utt")
    };
    assert!(n(&["--subset-known-raters"], "known") < n(&[], "all"));
}

#[test]
fn constant_mean_checkpoint_reports_undefined_srcc() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), SMALL);
    let out = dir.path().join("t");
    ok(&["train", "--data", s(&sim), "--out", s(&out), "--constant-mean"]);
    let ev = dir.path().join("e");
    ok(&["evaluate", "--checkpoint", s(&out.join("model.ckpt")), "--data", s(&sim), "--out", s(&ev)]);
    let row = csv_rows(&ev.join("report.csv")).remove(0);
    assert_eq!(row["utt_srcc"], "undefined");
    assert_eq!(row["sys_srcc"], "undefined");
    assert!(num(&row, "utt_mse") > 0.0);
}

#[test]
fn ablation_grid_rows_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "n_systems = 20\nutterances_per_system = 20\nembed_dim = 4\nframes_range = 1, 3\ntest_per_system = 5\n");
    let grid = dir.path().join("grid.txt");
    std::fs::write(&grid, "# two rows\nConstant Mean\nS\n").unwrap();
    let out = dir.path().join("a");
    ok(&["ablate", "--data", s(&sim), "--grid", s(&grid), "--out", s(&out)]);
    let rows = csv_rows(&out.join("ablation.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["config"], "Constant Mean");
    assert!(num(&rows[1], "utt_mse") < num(&rows[0], "utt_mse"));
    assert!(out.join("configs/s/model.ckpt").is_file());

    std::fs::write(&grid, "W2V+S (valtrain)\nS+R\n").unwrap();
    let out = dir.path().join("b");
    ok(&["ablate", "--data", s(&sim), "--grid", s(&grid), "--out", s(&out), "--epochs", "1"]);
    let rows = csv_rows(&out.join("ablation.csv"));
    assert!(rows[0]["status"].starts_with("error"), "{:?}", rows[0]);
    assert_eq!(rows[1]["status"], "ok");
}

#[test]
fn analyze_single_split_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(
        dir.path(),
        "n_systems = 12\nutterances_per_system = 12\nembed_dim = 4\nframes_range = 1, 2\n\
         test_per_system = 1, 1, 1, 1, 5, 5, 5, 5, 5, 5, 0, 0\nunseen_systems = 2\n",
    );
    let out = dir.path().join("one");
    ok(&["analyze", &format!("test={}", s(&sim.join("test.csv"))), "--min-count", "2", "--out", s(&out)]);
    assert!(out.join("test_counts.csv").is_file() && out.join("test_mos_grid.svg").is_file());
    assert!(std::fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().starts_with("divergence")));
    for svg in ["test_counts.svg", "test_mos_grid.svg"] {
        roxmltree::Document::parse(&std::fs::read_to_string(out.join(svg)).unwrap()).unwrap();
    }
    let flags = csv_rows(&out.join("test_systems.csv"));
    assert_eq!(flags.len(), 12);
    for row in &flags {
        assert_eq!(row["flagged"] == "true", row["n"] == "1", "{row:?}");
    }

    let out = dir.path().join("two");
    ok(&[
        "analyze",
        &format!("train={}", s(&sim.join("train.csv"))),
        &format!("test={}", s(&sim.join("test.csv"))),
        "--out",
        s(&out),
    ]);
    let div = csv_rows(&out.join("divergence_test.csv"));
    let unseen: Vec<_> = div.iter().filter(|r| r["kind"] == "system").collect();
    assert_eq!(unseen.len(), 2, "{div:?}");
    assert!(std::fs::read_to_string(out.join("report.md")).unwrap().contains("sys11"));
}
