use std::path::Path;
use std::process::{Command, Output};

fn mgspa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgspa"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn plan_reaches_the_toy_fixed_point() {
    let out = mgspa(&["plan"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("49.999"), "unexpected output: {text}");
}

#[test]
fn solve_stage_certifies_the_equilibrium() {
    let out = mgspa(&["solve-stage", "--value", "50", "--tol", "1e-8"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("game value 50.000000"), "unexpected output: {text}");
}

#[test]
fn evaluate_matches_the_analytic_flip_curve() {
    let out = mgspa(&["evaluate", "--policy", "ne", "--attack-prob", "1.0", "--seed", "4"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("mean step reward 0.0000"), "unexpected output: {text}");
}

#[test]
fn unknown_config_key_fails_with_machine_readable_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "gama = 0.5\n").unwrap();
    let out = mgspa(&["plan", "--config", config.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert!(parsed["error"].as_str().unwrap().contains("gama"));
}

#[test]
fn matrix_runs_are_bit_identical_and_echo_config(){
    let run = |dir: &Path| {
        let out = mgspa(&[
            "matrix",
            "--seed",
            "9",
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        std::fs::read_to_string(dir.join("matrix.csv")).unwrap()
    };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let a = run(d1.path());
    let b = run(d2.path());
    assert_eq!(a, b);
    assert!(a.starts_with("# robustness-matrix schema v1"));
    assert!(d1.path().join("config.toml").exists());
}

#[test]
fn train_rmaq_writes_curve_and_q_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(&config, "[rmaq]\nepisodes = 3\nsteps_per_episode = 5\n").unwrap();
    let out = mgspa(&[
        "train-rmaq",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("rmaq_curve_seed2.csv")).unwrap();
    assert!(curve.starts_with("episode,discounted_return,q_gap"));
    assert_eq!(curve.lines().count(), 4);
    assert!(dir.path().join("rmaq_q_seed2.json").exists());
}

#[test]
fn train_rmaac_writes_curve_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "[rmaac]\nepisodes = 2\nhidden = 8\nminibatch = 8\nupdate_every = 20\niteration_steps = 1\n",
    )
    .unwrap();
    let out = mgspa(&[
        "train-rmaac",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let curve = std::fs::read_to_string(dir.path().join("rmaac_curve_seed2.csv")).unwrap();
    assert!(curve.starts_with("episode,episode_reward"));
    assert!(dir.path().join("rmaac_checkpoint_seed2.json").exists());
}
