mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use otafl::fedsim::{MANIFEST_FILE, METRICS_FILE};

fn otafl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otafl"))
        .args(args)
        .args(["--log", "warn"])
        .current_dir(cwd)
        .env_remove("OTAFL_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    common::write_toy_mnist(&dir.join("data"), 20);
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        format!(
            "seed = 7\n\n[training]\nepochs = 1\ntrials = 2\neval_every = 2\nlearning_rate = 0.1\n\n[data]\ndir = \"data\"\n\n[output]\ndir = \"runs\"\n{extra}"
        ),
    )
    .unwrap();
    path
}

#[test]
fn verify_moments_exit_code_tracks_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = otafl(&["verify-moments", "--output", "m.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));

    // A few hundred rounds cannot pin the variance to 3%.
    let out = otafl(&["verify-moments", "--realizations", "200"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains(",false"));
}

#[test]
fn dump_phase_writes_requested_realizations() {
    let dir = tempfile::tempdir().unwrap();
    let out = otafl(
        &[
            "dump-phase",
            "--realizations",
            "50",
            "--scenarios",
            "low,high,none",
            "--out",
            "phase",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for scenario in ["low", "high", "none"] {
        let mut rdr =
            csv::Reader::from_path(dir.path().join(format!("phase/phase_{scenario}.csv"))).unwrap();
        let mut realizations = std::collections::BTreeSet::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.unwrap();
            realizations.insert(rec[0].parse::<usize>().unwrap());
            let phase: f64 = rec[2].parse().unwrap();
            if scenario == "none" {
                assert_eq!(phase, 0.0);
            }
            rows += 1;
        }
        assert_eq!(realizations.len(), 50);
        assert_eq!(rows, 50 * 879);
    }
}

#[test]
fn train_writes_run_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for out_dir in ["a", "b"] {
        let out = otafl(&["train", "--config", cfg, "--out", out_dir], dir.path());
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    let a = fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let b = fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    // 20 per class -> 200 samples, 20 per device, 4 rounds; eval every 2.
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 2 * 2);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a").join(MANIFEST_FILE)).unwrap())
            .unwrap();
    assert_eq!(manifest["config"]["system"]["base_seed"], 7);
    assert_eq!(manifest["completed_trials"], serde_json::json!([0, 1]));

    // A different seed changes the run.
    let out = otafl(
        &["train", "--config", cfg, "--out", "c", "--seed", "8"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(
        fs::read(dir.path().join("c").join(METRICS_FILE)).unwrap(),
        fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn sweep_creates_one_directory_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = otafl(
        &[
            "sweep",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "training.trials=10",
            "--set",
            "training.eval_every=4",
            "--jobs",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut runs = 0;
    for cell in fs::read_dir(dir.path().join("runs")).unwrap() {
        let cell = cell.unwrap().path();
        for run in fs::read_dir(&cell).unwrap() {
            let run = run.unwrap().path();
            assert!(run.join(METRICS_FILE).is_file(), "{}", run.display());
            assert!(run.join(MANIFEST_FILE).is_file());
            runs += 1;
        }
    }
    assert_eq!(runs, 4 * 2 * 10);
    assert!(dir.path().join("runs/sort-high/trial-09").is_dir());
    let m =
        fs::read_to_string(dir.path().join("runs/roll-low/trial-03").join(METRICS_FILE)).unwrap();
    let row = m.lines().nth(1).unwrap();
    assert!(row.starts_with("3,1,4,roll,0.0005,"), "{row}");
}

#[test]
fn config_errors_exit_one_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "\n[system]\nnum_devicez = 3\n");
    let out = otafl(&["train", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("num_devicez") && err.contains("line"), "{err}");

    let out = otafl(&["train", "--set", "training.learning_rate=-1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"));
}

#[test]
fn missing_data_exits_two_with_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = otafl(
        &["inspect-data", "--set", "data.dir=\"nowhere\""],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("nowhere/train-images-idx3-ubyte"), "{err}");
}

#[test]
fn data_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    common::write_toy_mnist(&dir.path().join("envdata"), 20);
    let out = Command::new(env!("CARGO_BIN_EXE_otafl"))
        .args(["inspect-data", "--log", "warn"])
        .current_dir(dir.path())
        .env("OTAFL_DATA_DIR", dir.path().join("envdata"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("train samples: 200"), "{text}");
    assert!(text.contains("shards: 20 of 10 samples"), "{text}");
    assert_eq!(
        text.lines().filter(|l| l.starts_with("device ")).count(),
        10
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mnist = otafl::config::load_config(Some(&root.join("mnist.toml")), &[]).unwrap();
    let defaults = otafl::config::parse_config("").unwrap();
    assert_eq!(mnist.system, defaults.system);
    assert_eq!(mnist.training, defaults.training);
    assert_eq!(mnist.sweep, defaults.sweep);
    let desk = otafl::config::load_config(Some(&root.join("desk.toml")), &[]).unwrap();
    assert_eq!(desk.system.sigma_e2, 0.0);
    assert_eq!(desk.data.dir.as_deref(), Some(Path::new("data/desk")));
}
