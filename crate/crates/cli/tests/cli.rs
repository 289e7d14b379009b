use std::path::Path;
use std::process::{Command, Output};

fn loramoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loramoe"))
        .args(args)
        .env_remove("DARWIN_CSV")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
base = "hidden_sweep"
name = "tiny"
sweep = [8, 16]
repetitions = 2

[train]
epochs = 3
"#;

fn run_tiny(dir: &Path, out: &str) -> Vec<u8> {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join(out);
    let o = loramoe(&[
        "run",
        cfg.to_str().unwrap(),
        "--synthetic",
        "--no-time",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("StackMean"));
    std::fs::read(out).unwrap()
}

#[test]
fn list_specs_names_the_catalog() {
    let o = loramoe(&["list-specs"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in [
        "hidden_sweep",
        "expert_sweep",
        "rank_sweep",
        "task_level",
        "depth5",
        "depth8",
        "vote_by_task",
    ] {
        assert!(text.contains(name), "{name} missing");
    }
    let toml = stdout(&loramoe(&["list-specs", "--toml"]));
    assert!(toml.contains("protocol = \"vote_by_task\""));
}

#[test]
fn config_run_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_tiny(dir.path(), "a.csv");
    let b = run_tiny(dir.path(), "b.csv");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().next().unwrap().starts_with("arch,model"));
    // 3 architectures x (2 widths + 2 stacks)
    assert_eq!(text.lines().count(), 1 + 12);
}

#[test]
fn run_without_data_fails_clearly() {
    let o = loramoe(&["run", "hidden_sweep"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("DARWIN_CSV"));
}

#[test]
fn unknown_config_is_an_error() {
    let o = loramoe(&["run", "no_such_spec", "--synthetic"]);
    assert!(!o.status.success());
}

#[test]
fn param_report_prints_reduction() {
    let o = loramoe(&["param-report", "rank_sweep"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("LoRA-MoE BL_")).count(),
        8,
        "{text}"
    );
    assert!(text.contains('%'));
}

#[test]
fn check_commands_pass() {
    assert!(loramoe(&["gradcheck"]).status.success());
    assert!(loramoe(&["verify-routing", "--pairs", "2000"]).status.success());
}
