//! End-to-end runs of the `crossbar-bp` binary on a tiny generated dataset.

use std::fs;
use std::path::Path;
use std::process::Command;

use crossbar_bp::experiment::{metrics_csv, run_cell, RunSummary};
use crossbar_bp::mnist::{Dataset, IMAGE_MAGIC, LABEL_MAGIC, PIXELS};
use crossbar_bp::ExperimentConfig;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_crossbar-bp"));
    cmd.env_remove("CROSSBAR_BP_DATA");
    cmd
}

/// Writes a small separable dataset in IDX format: class k brightens
/// pixel block k.
fn write_idx(dir: &Path, prefix: &str, n: usize, offset: usize) {
    let mut images = Vec::new();
    for x in [IMAGE_MAGIC, n as u32, 28, 28] {
        images.extend_from_slice(&x.to_be_bytes());
    }
    let mut labels = Vec::new();
    for x in [LABEL_MAGIC, n as u32] {
        labels.extend_from_slice(&x.to_be_bytes());
    }
    for s in 0..n {
        let label = (s * 3 + offset) % 10;
        for p in 0..PIXELS {
            let on = p / 78 == label;
            images.push(if on { 200 + ((p + s) % 50) as u8 } else { ((p * s) % 7) as u8 });
        }
        labels.push(label as u8);
    }
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
}

fn dataset_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_idx(dir.path(), "train", 120, 0);
    write_idx(dir.path(), "t10k", 40, 1);
    dir
}

fn small_args() -> Vec<&'static str> {
    vec!["--hidden", "12", "--eval-interval", "20"]
}

#[test]
fn device_curves_need_no_data() {
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .args(["--preset", "fig6", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let csv = fs::read_to_string(out.path().join("device_curves.csv")).unwrap();
    assert_eq!(csv.lines().count(), 66);
}

#[test]
fn config_errors_exit_with_2() {
    let out = bin().args(["--method", "d"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("method"));

    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images"));

    let out = bin().args(["--preset", "fig99"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreadable_dataset_exits_with_1() {
    let empty = tempfile::tempdir().unwrap();
    let out_dir = tempfile::tempdir().unwrap();
    let status = bin()
        .env("CROSSBAR_BP_DATA", empty.path())
        .arg("--out")
        .arg(out_dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn grid_output_is_independent_of_worker_count() {
    let data = dataset_dir();
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    for (out, jobs) in [(&serial, "1"), (&parallel, "3")] {
        let status = bin()
            .env("CROSSBAR_BP_DATA", data.path())
            .args(small_args())
            .args(["--beta", "0,2", "--method", "a,b", "--jobs", jobs, "--out"])
            .arg(out.path())
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(0));
    }
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(serial.path().join("index.json")).unwrap()).unwrap();
    let cells = index["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for cell in cells {
        assert_eq!(cell["status"], "ok");
        let name = cell["name"].as_str().unwrap();
        let a = fs::read(serial.path().join(format!("{name}.csv"))).unwrap();
        let b = fs::read(parallel.path().join(format!("{name}.csv"))).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn single_cell_matches_direct_run_and_echoes_config() {
    let data = dataset_dir();
    let out = tempfile::tempdir().unwrap();
    let status = bin()
        .env("CROSSBAR_BP_DATA", data.path())
        .args(small_args())
        .args(["--beta", "1", "--sigma", "0.3", "--seed", "9", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    let config = ExperimentConfig {
        beta: 1.0,
        sigma: 0.3,
        seed: 9,
        hidden: vec![12],
        eval_interval: 20,
        ..ExperimentConfig::default()
    }
    .resolved();
    let stem = crossbar_bp::experiment::cell_name(&config);
    let summary: RunSummary =
        serde_json::from_str(&fs::read_to_string(out.path().join(format!("{stem}.summary.json"))).unwrap()).unwrap();
    assert_eq!(summary.config, config);
    assert_eq!(summary.seed, 9);

    let d = data.path();
    let train = Dataset::load(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte")).unwrap();
    let test = Dataset::load(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")).unwrap();
    let direct = run_cell(&config, &train, &test).unwrap();
    let csv = fs::read_to_string(out.path().join(format!("{stem}.csv"))).unwrap();
    assert_eq!(csv, metrics_csv(&direct.metrics));
    assert_eq!(csv.lines().count(), 1 + 120 / 20);
}

#[test]
fn config_file_with_flag_override() {
    let data = dataset_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg = out.path().join("run.toml");
    fs::write(
        &cfg,
        format!(
            "[experiment]\nhidden = [8]\neval_interval = 40\nmode = \"offchip\"\nsigma = 0.5\nrepeats = 3\n\
             [data]\ndir = {:?}\n[grid]\nn_max = [32, 64]\n",
            data.path()
        ),
    )
    .unwrap();
    let status = bin()
        .arg("--config")
        .arg(&cfg)
        .args(["--seed", "4", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let index: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("index.json")).unwrap()).unwrap();
    let cells = index["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    for cell in cells {
        let name = cell["name"].as_str().unwrap();
        assert!(name.starts_with("offchip_") && name.ends_with("_seed4"), "{name}");
        let summary: RunSummary =
            serde_json::from_str(&fs::read_to_string(out.path().join(format!("{name}.summary.json"))).unwrap())
                .unwrap();
        assert_eq!(summary.transfer.unwrap().accuracies.len(), 3);
    }

    fs::write(&cfg, "[experiment]\nbogus = 1\n").unwrap();
    let out2 = bin().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out2.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out2.stderr).contains("bogus"));
}
