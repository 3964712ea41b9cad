use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn zpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zpg")).args(args).output().expect("binary runs")
}

fn run_to(sub: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    zpg(&args)
}

#[test]
fn results_are_bit_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("threshold_pair.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_to("pn-dist", &cfg, &a, &["--workers", "1"]).status.success());
    assert!(run_to("pn-dist", &cfg, &b, &["--workers", "4"]).status.success());
    for file in ["results.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["workers"], 4);
    assert_eq!(manifest["seeds"], serde_json::json!([7]));
}

#[test]
fn every_task_writes_its_reports() {
    let dir = tempfile::tempdir().unwrap();
    for (sub, cfg) in [
        ("pn-dist", "ten_pi_pulse.toml"),
        ("threshold", "threshold_pair.toml"),
        ("fom", "ten_pi_pulse.toml"),
        ("hom", "hom.toml"),
        ("pn-dist", "custom_source.toml"),
    ] {
        let out = dir.path().join(format!("{sub}-{cfg}"));
        let o = run_to(sub, &configs().join(cfg), &out, &[]);
        assert!(o.status.success(), "{sub} {cfg}: {}", String::from_utf8_lossy(&o.stderr));
        for file in ["results.csv", "summary.json", "manifest.json"] {
            assert!(out.join(file).exists(), "{sub} {cfg} missing {file}");
        }
    }
}

#[test]
fn seed_flag_changes_the_circuit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("threshold_pair.toml");
    assert!(run_to("threshold", &cfg, &dir.path().join("a"), &["--seed", "99"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["circuit"]["seed"], 99);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "task = \"pn_dist\"\n[[sources]]\nkind = \"two_level\"\ngama = 1.0\n").unwrap();
    let o = run_to("pn-dist", &bad, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gama") && err.contains("line"), "{err}");
    let o = run_to("pn-dist", &dir.path().join("missing.toml"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn guard_refusal_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.toml");
    fs::write(
        &cfg,
        "[[sources]]\nkind = \"two_level\"\ngamma = 1.0\npulse = { theta_over_pi = 1.0, tau = 0.5 }\n\
         [bench]\nn_max = 4\npoints_ladder = [400]\nreference_truncation = 8\n",
    )
    .unwrap();
    let o = run_to("bench", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dark.toml");
    // an undriven emitter in its ground state never emits, so g2 is undefined
    fs::write(&cfg, "[[sources]]\nkind = \"two_level\"\ngamma = 1.0\n").unwrap();
    let o = run_to("fom", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
