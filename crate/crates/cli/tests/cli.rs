//! Exit codes, stage caching and failure markers of the `longct` binary on a
//! miniature configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[phantom]
n_studies = 4
split_ratio = [2.0, 1.0, 1.0]
grid_size = 32

[preprocess]
target_size = 32

[registration]
max_iterations = 20

[model]
first_conv_filters = 4
growth_rate = 2
down_blocks = [1, 1]
up_blocks = [1, 1]
bottleneck_layers = 1

[train]
max_epochs = 2
early_stop_patience = 1
max_items_per_epoch = 4
max_val_items = 4
views = ["axial"]
"#;

fn longct(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_longct"));
    cmd.args(args).arg("--out").arg(out).env_remove("LONGCT_DEVICE").env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

/// Stage → whether it ran, parsed from the `run` summary.
fn statuses(o: &Output) -> BTreeMap<String, bool> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| {
            let mut it = l.split_whitespace();
            let (stage, status) = (it.next()?, it.next()?);
            match status {
                "ran" => Some((stage.to_string(), true)),
                "cached" => Some((stage.to_string(), false)),
                _ => None,
            }
        })
        .collect()
}

fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stderr:\n{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unsupported_device_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_longct"))
        .args(["phantom", "--out"])
        .arg(dir.path())
        .env("LONGCT_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_exit(&o, 2);
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["[phantom]\nno_such_key = 1\n", "[preprocess]\nclip_lo = 700.0\n", "seed = -1\n", "[train\n"] {
        let cfg = write_config(dir.path(), text);
        let o = longct(&["run"], &dir.path().join("out"), Some(&cfg));
        assert_exit(&o, 2);
    }
    assert!(!dir.path().join("out/phantom").exists());
}

#[test]
fn missing_input_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = longct(&["preprocess", "--manifest", "does/not/exist.json"], dir.path(), None);
    assert_exit(&o, 3);
}

#[test]
fn pipeline_caches_invalidates_and_marks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");

    let first = longct(&["run"], &out, Some(&cfg));
    assert_exit(&first, 0);
    let s = statuses(&first);
    assert_eq!(s.len(), 8);
    assert!(s.values().all(|&ran| ran));
    let manifest = fs::read(out.join("artifacts.json")).unwrap();

    let second = longct(&["run"], &out, Some(&cfg));
    assert_exit(&second, 0);
    assert!(statuses(&second).values().all(|&ran| !ran), "{:?}", statuses(&second));
    assert_eq!(fs::read(out.join("artifacts.json")).unwrap(), manifest);

    // A tampered registration output re-runs that stage and everything below.
    let pairs: serde_json::Value = serde_json::from_slice(&fs::read(out.join("register/pairs.json")).unwrap()).unwrap();
    let pair_dir = pairs["pairs"][0]["dir"].as_str().unwrap();
    fs::write(out.join("register").join(pair_dir).join("x1.nii"), b"corrupt").unwrap();
    let third = longct(&["run"], &out, Some(&cfg));
    assert_exit(&third, 0);
    let s = statuses(&third);
    assert!(!s["phantom"] && !s["preprocess"]);
    for stage in ["register", "train_static", "train_longitudinal", "infer", "progress", "evaluate"] {
        assert!(s[stage], "{stage} should have re-run");
    }
    // Registration is deterministic, so the regenerated tree matches.
    assert_eq!(fs::read(out.join("artifacts.json")).unwrap(), manifest);

    // A corrupted checkpoint that its record vouches for makes inference fail.
    let ckpt = out.join("train_static/model.safetensors");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let rec_path = out.join("train_static/stage.json");
    let mut rec: serde_json::Value = serde_json::from_slice(&fs::read(&rec_path).unwrap()).unwrap();
    rec["artifacts"]["model.safetensors"] = longct::store::sha256_file(&ckpt).unwrap().into();
    fs::write(&rec_path, serde_json::to_vec(&rec).unwrap()).unwrap();
    let fourth = longct(&["run"], &out, Some(&cfg));
    assert_exit(&fourth, 3);
    assert!(out.join("infer/FAILED").exists());
    assert!(!out.join("infer/stage.json").exists());
}
