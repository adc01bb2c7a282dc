//! End-to-end checks of the command-line surface: exit codes, file outputs,
//! determinism, and the JSON report schemas.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cmemd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cmemd"))
}

fn run(args: &[&str]) -> Output {
    cmemd().args(args).output().expect("binary runs")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Tiny synthetic profile so CLI tests stay fast.
fn quick_config(dir: &Path, seed: u64, extra: &str) -> String {
    let path = dir.join(format!("cfg_{}.toml", seed));
    let text = format!(
        "[data.synth]\nnum_identities = 8\ntrain_identities = 6\n\
         samples_per_identity_per_modality = 6\nseed = {}\n\
         [batch]\nidentities = 3\nvisible_per_identity = 2\nthermal_per_identity = 2\n\
         [optim]\nepochs = 2\niters_per_epoch = 2\n\
         [run]\nseed = {}\nout_dir = \"{}\"\n{}",
        seed * 71,
        seed,
        dir.join(format!("out_{}", seed)).display(),
        extra
    );
    write(&path, &text);
    path.display().to_string()
}

#[test]
fn gen_data_is_checksum_stable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 1, "");
    let out = run(&["gen-data", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest1 = fs::read_to_string(dir.path().join("out_1/manifest.json")).unwrap();
    // Regenerate: identical manifest (checksums included).
    let out = run(&["gen-data", "--config", &cfg]);
    assert!(out.status.success());
    let manifest2 = fs::read_to_string(dir.path().join("out_1/manifest.json")).unwrap();
    assert_eq!(manifest1, manifest2);
    // A different seed changes the data checksums.
    let cfg2 = quick_config(dir.path(), 2, "");
    let out = run(&["gen-data", "--config", &cfg2]);
    assert!(out.status.success());
    let manifest3 = fs::read_to_string(dir.path().join("out_2/manifest.json")).unwrap();
    let sha = |m: &str| -> Vec<String> {
        m.lines().filter(|l| l.contains("sha256")).map(|l| l.to_string()).collect()
    };
    assert_ne!(sha(&manifest1), sha(&manifest3));
}

#[test]
fn train_twice_identical_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 3, "");
    assert!(run(&["train", "--config", &cfg]).status.success());
    let m1 = fs::read(dir.path().join("out_3/metrics.csv")).unwrap();
    assert!(run(&["train", "--config", &cfg]).status.success());
    let m2 = fs::read(dir.path().join("out_3/metrics.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn eval_is_deterministic_and_respects_beta_extremes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(dir.path(), 4, "");
    assert!(run(&["gen-data", "--config", &cfg]).status.success());
    assert!(run(&["train", "--config", &cfg]).status.success());
    let ck = dir.path().join("out_4/checkpoint.bin");
    let test_csv = dir.path().join("out_4/test.csv");
    let r1 = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--test-file", test_csv.to_str().unwrap()]);
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    let r2 = run(&["eval", "--checkpoint", ck.to_str().unwrap(), "--test-file", test_csv.to_str().unwrap()]);
    assert_eq!(r1.stdout, r2.stdout);
    let report: serde_json::Value = serde_json::from_slice(&r1.stdout).unwrap();
    assert_eq!(report["schema_version"], 1);
    for dir_key in ["visible_to_thermal", "thermal_to_visible"] {
        let r = &report[dir_key];
        for k in ["rank_1", "rank_10", "rank_20", "map", "direction", "excluded_queries"] {
            assert!(!r[k].is_null(), "{} missing {}", dir_key, k);
        }
    }
    // Beta extremes change the report (global-only vs local-only rankings).
    let b0 = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test-file",
        test_csv.to_str().unwrap(),
        "--beta",
        "0",
    ]);
    let b1 = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test-file",
        test_csv.to_str().unwrap(),
        "--beta",
        "1",
    ]);
    assert!(b0.status.success() && b1.status.success());
    assert_ne!(b0.stdout, b1.stdout);
}

#[test]
fn ot_solve_single_cell_and_exact_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("one.csv");
    write(&one, "3.5\n");
    let out = run(&["ot-solve", one.to_str().unwrap()]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["plan"][0][0], 1.0);

    let two = dir.path().join("two.csv");
    write(&two, "0,10\n10,0\n");
    let out = run(&["ot-solve", two.to_str().unwrap(), "--epsilon", "0.01", "--exact"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let sink = v["objective"].as_f64().unwrap();
    let exact = v["exact"]["objective"].as_f64().unwrap();
    assert!(exact.abs() < 1e-12);
    assert!((sink - exact).abs() < 1e-3);
    assert_eq!(v["row_monotone_in_adjusted_cost"], true);
}

#[test]
fn ot_solve_malformed_csv_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    write(&bad, "1,2\n3,oops\n");
    let out = run(&["ot-solve", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr was: {}", err);
}

#[test]
fn gradcheck_passes_fails_and_vacuous() {
    let out = run(&["gradcheck", "--probes", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gradcheck: PASS"));
    for name in [
        "cm_emd_frozen_plan",
        "cm_dl",
        "identity",
        "holistic_part_weights",
        "encoder_end_to_end",
    ] {
        assert!(text.contains(name), "missing component {}", name);
    }

    let out = run(&["gradcheck", "--probes", "3", "--corrupt", "cm_dl"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["gradcheck", "--probes", "0"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("vacuous"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn trained_checkpoint_beats_untrained_on_rank1() {
    let dir = tempfile::tempdir().unwrap();
    let make_cfg = |name: &str, epochs: usize| -> std::path::PathBuf {
        let path = dir.path().join(format!("{}.toml", name));
        write(
            &path,
            &format!(
                "[batch]\nidentities = 6\nvisible_per_identity = 4\nthermal_per_identity = 4\n\
                 [mgs]\nalpha = 1.0\ngamma = [3.0, 2.0, 0.4, 1.0, 0.6]\nbeta = 0.5\n\
                 [optim]\nepochs = {}\nlr_decay_every = 8\n\
                 [run]\nseed = 9\nout_dir = \"{}\"\n",
                epochs,
                dir.path().join(name).display()
            ),
        );
        path
    };
    let trained_cfg = make_cfg("trained", 20);
    let untrained_cfg = make_cfg("untrained", 0);
    let ds = dir.path().join("ds");
    assert!(run(&["gen-data", "--config", trained_cfg.to_str().unwrap(), "--out", ds.to_str().unwrap()])
        .status
        .success());
    assert!(run(&["train", "--config", trained_cfg.to_str().unwrap()]).status.success());
    assert!(run(&["train", "--config", untrained_cfg.to_str().unwrap()]).status.success());
    let rank1 = |ck: &Path| -> f64 {
        let out = run(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--test-file",
            ds.join("test.csv").to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        (v["visible_to_thermal"]["rank_1"].as_f64().unwrap()
            + v["thermal_to_visible"]["rank_1"].as_f64().unwrap())
            / 2.0
    };
    let trained = rank1(&dir.path().join("trained/checkpoint.bin"));
    let untrained = rank1(&dir.path().join("untrained/checkpoint.bin"));
    assert!(
        trained > untrained,
        "trained rank1 {} should beat untrained {}",
        trained,
        untrained
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    write(&path, "[optim]\nlerning_rate = 0.1\n");
    let out = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lerning_rate"));
}

#[test]
fn unknown_preset_is_rejected() {
    let out = run(&["train", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sysu-profile"));
}

#[test]
fn presets_resolve_and_train_epoch_zero() {
    let dir = tempfile::tempdir().unwrap();
    for preset in ["sysu-profile", "regdb-profile"] {
        let out_dir = dir.path().join(preset);
        // epochs can't be overridden by flags; use a config wrapper via
        // gen-data only to keep this fast: train with epochs=0 through a
        // derived config file.
        let cfg_path = dir.path().join(format!("{}.toml", preset));
        let base = match preset {
            "sysu-profile" => "[batch]\nidentities = 6\nvisible_per_identity = 8\nthermal_per_identity = 8\n[mgs]\nalpha = 0.2\ngamma = [1.0, 1.0, 0.1, 2.0, 0.1]\nbeta = 0.7\n",
            _ => "[batch]\nidentities = 6\nvisible_per_identity = 4\nthermal_per_identity = 4\n[mgs]\nalpha = 1.0\ngamma = [3.0, 2.0, 0.4, 1.0, 0.6]\nbeta = 0.5\n",
        };
        let text = format!(
            "{}[optim]\nepochs = 0\n[run]\nout_dir = \"{}\"\n",
            base,
            out_dir.display()
        );
        write(&cfg_path, &text);
        let out = run(&["train", "--config", cfg_path.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        let rows: Vec<&str> = metrics.lines().skip(2).collect();
        assert_eq!(rows.len(), 1, "epochs=0 emits only the initial row");
        assert!(rows[0].starts_with("0,"));
    }
}
