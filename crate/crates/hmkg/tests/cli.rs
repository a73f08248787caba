//! End-to-end tests of the `hmkg` binary: every subcommand is driven through
//! `std::process::Command` against a small generated cohort, and the observable
//! contract (exit codes, stdout JSON, emitted files) is checked rather than any
//! library internals.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hmkg::config::RunConfig;
use hmkg::model::ModelDims;
use hmkg::report::{load_report, KM_FILE, RESULTS_FILE, TABLE_FILE};
use hmkg::synth::{SignalMode, SynthSpec};

fn hmkg() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hmkg"));
    cmd.env_remove("HMKG_SEED");
    cmd
}

fn run_ok(cmd: &mut Command) -> serde_json::Value {
    let output = cmd.output().expect("spawn hmkg");
    if !output.status.success() {
        panic!(
            "command failed with {:?}\nstdout: {}\nstderr: {}",
            output.status,
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr),
        );
    }
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

fn run_err(cmd: &mut Command) -> serde_json::Value {
    let output: Output = cmd.output().expect("spawn hmkg");
    assert!(
        !output.status.success(),
        "expected failure, got stdout: {}",
        String::from_utf8_lossy(&output.stdout)
    );
    serde_json::from_slice(&output.stderr).expect("stderr is JSON")
}

fn small_spec(dir: &Path) -> PathBuf {
    let spec = SynthSpec {
        cohort_id: "cli-null".to_string(),
        size: 12,
        seed: 5,
        mode: SignalMode::Null,
        n_tiles_min: 2,
        n_tiles_max: 3,
        dim_low: 6,
        dim_high: 6,
        censor_prob: 0.25,
        motif_cells: 4,
        ..SynthSpec::default()
    };
    let path = dir.join("spec.toml");
    spec.save(&path).unwrap();
    path
}

fn small_config(dir: &Path) -> PathBuf {
    let config = RunConfig {
        seed: 9,
        dims: ModelDims {
            d_low: 6,
            d_high: 6,
            d: 4,
            d_out: 4,
            t_bins: 2,
        },
        epochs: 2,
        learning_rate: 0.05,
        ..RunConfig::default()
    };
    let path = dir.join("run.toml");
    config.save(&path).unwrap();
    path
}

fn synth_cohort(dir: &Path) -> PathBuf {
    let spec = small_spec(dir);
    let cohort = dir.join("cohort");
    let summary = run_ok(hmkg().args(["synth", "--spec"]).arg(&spec).arg("--out").arg(&cohort));
    assert_eq!(summary["slides"], 12);
    cohort
}

fn bin_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .collect();
    files.sort();
    files
}

#[test]
fn synth_cv_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_cohort(dir.path());
    assert!(cohort.join("cohort.json").is_file());
    assert_eq!(bin_files(&cohort).len(), 12);

    let config = small_config(dir.path());
    let rep1 = dir.path().join("rep1");
    let rows = run_ok(
        hmkg()
            .args(["cv", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&rep1),
    );
    let rows = rows.as_array().expect("cv prints a result array");
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["variant"], "full");
    assert!(rows[0]["c_mean"].as_f64().unwrap().is_finite());

    for file in [RESULTS_FILE, TABLE_FILE, KM_FILE] {
        assert!(rep1.join(file).is_file(), "missing {file}");
    }
    let report = load_report(&rep1.join(RESULTS_FILE)).unwrap();
    assert_eq!(report.results.len(), 1);
    assert_eq!(report.results[0].folds.len(), 4);

    // The same config and cohort must reproduce results.json byte for byte.
    let rep2 = dir.path().join("rep2");
    run_ok(
        hmkg()
            .args(["cv", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&rep2),
    );
    assert_eq!(
        std::fs::read(rep1.join(RESULTS_FILE)).unwrap(),
        std::fs::read(rep2.join(RESULTS_FILE)).unwrap()
    );

    // `report` re-renders the derived files from results.json alone.
    let table_before = std::fs::read(rep1.join(TABLE_FILE)).unwrap();
    std::fs::remove_file(rep1.join(TABLE_FILE)).unwrap();
    std::fs::remove_file(rep1.join(KM_FILE)).unwrap();
    let summary = run_ok(hmkg().args(["report", "--in"]).arg(rep1.join(RESULTS_FILE)));
    assert_eq!(summary["rows"], 1);
    assert_eq!(std::fs::read(rep1.join(TABLE_FILE)).unwrap(), table_before);
    assert!(rep1.join(KM_FILE).is_file());
}

#[test]
fn train_then_eval_reports_concordance() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_cohort(dir.path());
    let config = small_config(dir.path());
    let ckpt = dir.path().join("model.ckpt.json");

    let summary = run_ok(
        hmkg()
            .args(["train", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&ckpt),
    );
    assert_eq!(summary["epochs"], 2);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    assert!(ckpt.is_file());

    let scores = run_ok(hmkg().args(["eval", "--ckpt"]).arg(&ckpt).arg("--cohort").arg(&cohort));
    assert_eq!(scores["cohort_id"], "cli-null");
    assert_eq!(scores["slides"], 12);
    let c = scores["c_index"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&c), "c_index {c} outside [0, 1]");
}

#[test]
fn ablate_covers_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_cohort(dir.path());
    let config = small_config(dir.path());
    let out = dir.path().join("ablation");

    let rows = run_ok(
        hmkg()
            .args(["ablate", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&out),
    );
    let names: Vec<_> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["variant"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(names, ["kgn_baseline", "single_scale", "no_locality", "full"]);
    let table = std::fs::read_to_string(out.join(TABLE_FILE)).unwrap();
    for name in &names {
        assert!(table.contains(name.as_str()), "table missing {name}");
    }
}

#[test]
fn failures_exit_nonzero_with_json_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());

    let err = run_err(
        hmkg()
            .args(["cv", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(dir.path().join("no-such-cohort"))
            .arg("--out")
            .arg(dir.path()),
    );
    assert!(err["error"].is_string());
    assert!(!err["message"].as_str().unwrap().is_empty());

    let err = run_err(hmkg().args(["eval", "--ckpt"]).arg(dir.path().join("missing.json")).arg("--cohort").arg(dir.path()));
    assert!(err["error"].is_string());

    let spec = small_spec(dir.path());
    let err = run_err(
        hmkg()
            .args(["synth", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(dir.path().join("cohort"))
            .env("HMKG_SEED", "not-a-number"),
    );
    assert_eq!(err["error"], "config");
}

#[test]
fn env_seed_overrides_file_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(dir.path());

    let mut dirs = Vec::new();
    for (name, seed) in [("a", "123"), ("b", "123"), ("c", "456")] {
        let out = dir.path().join(name);
        let summary = run_ok(
            hmkg()
                .args(["synth", "--spec"])
                .arg(&spec)
                .arg("--out")
                .arg(&out)
                .env("HMKG_SEED", seed),
        );
        assert_eq!(summary["seed"], seed.parse::<u64>().unwrap());
        dirs.push(out);
    }
    let read_first = |d: &PathBuf| std::fs::read(&bin_files(d)[0]).unwrap();
    assert_eq!(read_first(&dirs[0]), read_first(&dirs[1]));
    assert_ne!(read_first(&dirs[0]), read_first(&dirs[2]));

    // The override reaches cv runs too: a different seed changes the folds
    // and the initialization, so the emitted results must differ.
    let cohort = synth_cohort(dir.path());
    let config = small_config(dir.path());
    let plain = dir.path().join("rep-plain");
    let seeded = dir.path().join("rep-seeded");
    run_ok(
        hmkg()
            .args(["cv", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&plain),
    );
    run_ok(
        hmkg()
            .args(["cv", "--config"])
            .arg(&config)
            .arg("--cohort")
            .arg(&cohort)
            .arg("--out")
            .arg(&seeded)
            .env("HMKG_SEED", "77"),
    );
    assert_ne!(
        std::fs::read(plain.join(RESULTS_FILE)).unwrap(),
        std::fs::read(seeded.join(RESULTS_FILE)).unwrap()
    );
}
