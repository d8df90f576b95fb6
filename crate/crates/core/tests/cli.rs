use std::process::{Command, Output};

fn rsekf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsekf"))
        .args(args)
        .env_remove("RSEKF_OUT_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quad.toml");
    let out = dir.path().join("out");
    let o = rsekf(&["dump-preset", "quadrotor-load", "--out", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&cfg).unwrap();
    std::fs::write(&cfg, text.replace("preset = \"quadrotor-load\"", "preset = \"quadrotor-load\"\nsteps = 10")).unwrap();

    let o = rsekf(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--trials",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["trials.csv", "summary.json", "metadata.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let o = rsekf(&["compare", out.join("summary.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 2);
}

#[test]
fn env_var_sets_default_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "preset = \"quadrotor-load\"\nsteps = 5\ntrials = 1\nwrite_trajectories = false\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_rsekf"))
        .args(["run", "--config", cfg.to_str().unwrap()])
        .env("RSEKF_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("quadrotor-load").join("summary.json").exists());
}

#[test]
fn validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "preset = \"arm-push\"\nmu_max = 3.0\n").unwrap();
    let o = rsekf(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mu_max"), "{}", stderr(&o));

    let o = rsekf(&["run", "--preset", "arm-push", "--mu", "-1"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("summary.json");
    std::fs::write(&missing, "{\"preset\": \"arm-push\"}").unwrap();
    let o = rsekf(&["compare", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = rsekf(&[
        "compare",
        dir.path().join("absent.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verify_passes() {
    let o = rsekf(&["verify"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}
