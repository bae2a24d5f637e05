use std::fs;
use std::path::Path;
use std::process::Command;

use tssim::cli::{run_cli, EXIT_CONFIG, EXIT_OK};
use tssim::metrics::REPORT_FILES;

const SCENARIO: &str = "\
# short mixed-behaviour run
horizon = 1800
arrival_rate = 0.05
m = 4
";

fn write_cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("s.cfg");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut err = Vec::new();
    let argv = std::iter::once("tssim").chain(args.iter().copied());
    let code = run_cli(argv, &mut err);
    (code, String::from_utf8(err).unwrap())
}

#[test]
fn happy_path_writes_four_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SCENARIO);
    let out = dir.path().join("results");
    let (code, err) = cli(&["--config", &cfg, "--overlay", "tree", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{err}");
    for f in REPORT_FILES {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let avail: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("availability_ratio,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&avail));
}

#[test]
fn missing_config_is_usage_error() {
    let (code, err) = cli(&["--overlay", "tree"]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("--config"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_overlay_lists_valid_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SCENARIO);
    let (code, err) = cli(&["--config", &cfg, "--overlay", "dht"]);
    assert_eq!(code, EXIT_CONFIG);
    for name in ["tree", "mesh", "interval"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn config_errors_exit_one_with_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "horizon = 10\nk = -1\nnope = 3\n");
    let (code, err) = cli(&["--config", &cfg]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("line 2: k"), "{err}");
    assert!(err.contains("line 3: unknown key `nope`"), "{err}");
}

#[test]
fn unwritable_output_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SCENARIO);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = blocker.join("sub");
    let (code, err) = cli(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, EXIT_CONFIG);
    assert!(err.contains("sub"), "{err}");
}

#[test]
fn batch_runs_one_directory_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SCENARIO);
    let out = dir.path().join("batch");
    let (code, err) = cli(&[
        "--config", &cfg, "--overlay", "interval", "--seed", "3", "--runs", "3", "--horizon", "900", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK, "{err}");
    for s in 3..6 {
        assert!(out.join(format!("seed-{s}")).join("summary.csv").is_file());
    }
    // a batch member equals the same seed run alone
    let single = dir.path().join("single");
    let (code, _) = cli(&["--config", &cfg, "--overlay", "interval", "--seed", "4", "--horizon", "900", "--out", single.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK);
    for f in REPORT_FILES {
        assert_eq!(fs::read(single.join(f)).unwrap(), fs::read(out.join("seed-4").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn binary_runs_with_invariant_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SCENARIO);
    let out = dir.path().join("bin");
    let status = Command::new(env!("CARGO_BIN_EXE_tssim"))
        .args(["--config", &cfg, "--overlay", "mesh", "--check-invariants", "--out", out.to_str().unwrap()])
        .env("TSSIM_LOG", "info")
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(String::from_utf8_lossy(&status.stderr).contains("running mesh overlay"));
    let bad = Command::new(env!("CARGO_BIN_EXE_tssim")).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
