use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_harvester")).args(args).output().expect("binary runs")
}

#[test]
fn simulate_writes_trajectory_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let o = run(&["simulate", "--ic", "1.0,-1.4,0.008", "--tf", "0.05", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,phi,theta,theta_dot,i,x,action,reward");
    // 500 inner steps recorded every 10th, plus the start
    assert_eq!(lines.count(), 51);
}

#[test]
fn negative_initial_condition_is_a_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("traj.csv");
    let o = run(&["simulate", "--ic", "-1.15,-38,0.07", "--tf", "0.01", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out).unwrap();
    let first: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(&first[2..5], &[-1.15, -38.0, 0.07]);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["simulate", "--tf", "1"]).status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    let o = run(&["simulate", "--ic", "1.0,2.0", "--tf", "1", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&[
        "train-policy", "--controller", "spring", "--direction", "sideways", "--bound", "0.003", "--episodes", "1",
        "--seed", "1", "--boa", "x", "--out", "y",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let o = run(&["switch", "--policy", missing.to_str().unwrap(), "--seed", "1", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2));
    let scenarios = dir.path().join("s.json");
    std::fs::write(
        &scenarios,
        r#"{"scenarios":[{"label":"spring-RL","method":"rl","direction":"lp2hp","policy":"absent.json"}]}"#,
    )
    .unwrap();
    let o = run(&["compare", "--scenarios", scenarios.to_str().unwrap(), "--trials", "1", "--seed", "1", "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("spring-RL"));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
