use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn plflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plflow"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn every_subcommand_is_listed() {
    let dir = tempfile::tempdir().unwrap();
    let help = String::from_utf8(plflow(&["--help"], dir.path()).stdout).unwrap();
    for cmd in [
        "simulate",
        "sweep-convergence",
        "sweep-threshold",
        "sweep-curvature",
        "phase-transition",
        "check-assumptions",
        "counterexample",
        "init-probability",
    ] {
        assert!(help.contains(cmd), "missing {cmd}");
    }
}

#[test]
fn phase_transition_writes_tables_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = plflow(&["phase-transition", "--out", "pt/run.csv", "--svg"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["run.csv", "run.summary.csv", "run.curves.csv", "run.svg"] {
        assert!(dir.path().join("pt").join(name).is_file(), "missing {name}");
    }
    let main = fs::read_to_string(dir.path().join("pt/run.csv")).unwrap();
    assert!(main.starts_with("source,n,group,magnitude,midpoint"));
    assert!(fs::read_to_string(dir.path().join("pt/run.svg")).unwrap().contains("<svg"));
}

#[test]
fn json_output_is_one_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = plflow(
        &["init-probability", "--format", "json", "--out", "p.json", "--trials", "2000"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("p.json")).unwrap();
    assert!(text.trim_start().starts_with('{'));
    assert!(text.contains("\"experiment\": \"init-probability\""));
    assert!(!dir.path().join("p.summary.csv").exists());
}

#[test]
fn same_seed_same_bytes_across_thread_caps() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| {
        vec![
            "sweep-curvature",
            "--seed",
            "5",
            "--trials",
            "3",
            "--set",
            "d=32",
            "--set",
            "n_list=8,16",
            "--out",
            out,
        ]
    };
    let run = |out: &'static str, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_plflow"))
            .args(args(out))
            .current_dir(dir.path())
            .env("PLFLOW_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join(out)).unwrap()
    };
    assert_eq!(run("a.csv", "1"), run("b.csv", "3"));
}

#[test]
fn config_file_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# good-initialization estimate\nexperiment = init-probability\nn = 6\np = 12\ntrials = 500\nseed = 3\n",
    )
    .unwrap();
    let out = plflow(
        &["init-probability", "--config", "run.cfg", "--trials", "700", "--out", "p.csv"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("p.csv")).unwrap();
    let row = table.lines().nth(1).unwrap();
    assert!(row.starts_with("6,6,12,700,"), "{row}");
}

#[test]
fn configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&plflow(&["simulate", "--set", "bogus=1"], dir.path())), 1);
    assert_eq!(code(&plflow(&["simulate", "--set", "p=0"], dir.path())), 1);
    assert_eq!(code(&plflow(&["simulate", "--format", "xml"], dir.path())), 1);
    fs::write(dir.path().join("other.cfg"), "experiment = counterexample\n").unwrap();
    assert_eq!(code(&plflow(&["simulate", "--config", "other.cfg"], dir.path())), 1);
}

#[test]
fn io_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&plflow(&["simulate", "--config", "missing.cfg"], dir.path())), 2);
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = plflow(&["phase-transition", "--out", "blocker/run.csv"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn audit_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // One large input and a balanced start: a step of 0.1 overshoots and
    // the loss rises, which is an audit failure at that step.
    fs::write(dir.path().join("data.csv"), "1,1,custom,0\n10,100\n").unwrap();
    fs::write(dir.path().join("state.csv"), "1,1\n3,1\n").unwrap();
    let out = plflow(
        &[
            "simulate",
            "--set",
            "data=data.csv",
            "--set",
            "state=state.csv",
            "--set",
            "horizon=1",
            "--step",
            "0.1",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("audit"));
    assert!(dir.path().join("simulate.csv").is_file());
}
