use std::path::PathBuf;
use std::process::Command;

fn example(name: &str) -> PathBuf {
    // target/<profile>/deps/<test> -> target/<profile>/examples/<name>
    let exe = std::env::current_exe().unwrap();
    let dir = exe.parent().unwrap().parent().unwrap().join("examples");
    dir.join(format!("{name}{}", std::env::consts::EXE_SUFFIX))
}

fn run(name: &str, args: &[&str]) -> String {
    let path = example(name);
    if !path.exists() {
        let status = Command::new(env!("CARGO"))
            .args(["build", "--example", name, "--manifest-path", concat!(env!("CARGO_MANIFEST_DIR"), "/Cargo.toml")])
            .status()
            .unwrap();
        assert!(status.success(), "building {name}");
    }
    let out = Command::new(&path).args(args).output().unwrap();
    assert!(out.status.success(), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn weights_construction() {
    assert!(!run("weights_construction", &[]).is_empty());
}

#[test]
fn likelihood_and_score() {
    assert!(!run("likelihood_and_score", &[]).is_empty());
}

#[test]
fn estimation() {
    assert!(!run("estimation", &[]).is_empty());
}

#[test]
fn score_tests() {
    assert!(!run("score_tests", &[]).is_empty());
}

#[test]
fn dense_oracle() {
    assert!(!run("dense_oracle", &[]).is_empty());
}

#[test]
fn monte_carlo_cell() {
    let out = run("monte_carlo_cell", &["16", "5", "8", "0", "0.2"]);
    assert!(out.contains("RS_robust"));
}

#[test]
fn simulate_panel() {
    let dir = tempfile::TempDir::new().unwrap();
    run("simulate_panel", &[dir.path().to_str().unwrap(), "16", "4", "0.1", "3"]);
    assert!(dir.path().join("panel.csv").exists());
    assert!(dir.path().join("weights").join("index.csv").exists());
}
