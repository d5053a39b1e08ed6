use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn efe_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_efe-lab")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_succeeds_and_bad_arguments_are_config_errors() {
    assert_eq!(code(&efe_lab(&["--help"])), 0);
    assert_eq!(code(&efe_lab(&["train", "--agent", "bogus"])), 1);
    assert_eq!(code(&efe_lab(&["frobnicate"])), 1);
}

#[test]
fn invalid_config_exits_one_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = efe_lab(&["train", "--agent", "dqn", "--scenario", "mdp", "--runs", "0", "--out", path(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
    let o = efe_lab(&["train", "--agent", "dqn", "--scenario", "mdp", "--set", "dqn.gamma=abc", "--out", path(&out)]);
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "runs 3\n").unwrap();
    assert_eq!(code(&efe_lab(&["train", "--config", path(&cfg), "--agent", "dqn", "--scenario", "mdp"])), 1);
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "# small run\nagent = random\nscenario = mdp\nruns = 2\nepisodes = 50\n").unwrap();
    let out = dir.path().join("o");
    let o = efe_lab(&["train", "--config", path(&cfg), "--episodes", "7", "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("random_mdp.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 7);
    assert!(!out.join("INCOMPLETE").exists());
}

#[test]
fn plot_reads_training_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = efe_lab(&["train", "--agent", "random", "--scenario", "mdp", "--runs", "2", "--episodes", "5", "--out", path(&out)]);
    assert_eq!(code(&o), 0);
    let svg = dir.path().join("p.svg");
    assert_eq!(code(&efe_lab(&["plot", "--in", path(&out), "--out", path(&svg)])), 0);
    assert!(fs::read_to_string(&svg).unwrap().contains("random_mdp"));
    assert_eq!(code(&efe_lab(&["plot", "--in", path(&dir.path().join("missing")), "--out", path(&svg)])), 2);
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = efe_lab(&["train", "--agent", "random", "--scenario", "mdp", "--runs", "1", "--episodes", "2", "--out", path(&blocker)]);
    assert_eq!(code(&o), 2);
}
