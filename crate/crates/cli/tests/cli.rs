use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmel"))
        .arg("--work-dir")
        .arg(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 6] = ["--set", "planted_mentions=10", "--set", "planted_entities=60", "--set", "dim=16"];

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&mmel(dir.path(), &["--help"]));
    for cmd in [
        "ingest",
        "build-graph",
        "train-teacher",
        "train-student",
        "synthesize",
        "induce-tree",
        "link",
        "eval",
        "gen-planted",
        "check-theorems",
        "run",
    ] {
        assert!(out.contains(cmd), "missing {cmd} in help:\n{out}");
    }
}

#[test]
fn training_and_linking_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train-teacher", "train-student", "link", "run"] {
        let o = mmel(dir.path(), &[cmd]);
        assert!(!o.status.success(), "{cmd} ran without a seed");
        assert!(stderr(&o).contains("--seed"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn seed_from_config_file_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    fs::write(&conf, "# planted smoke\nseed = 4\nplanted_mentions = 10\nplanted_entities = 60\ndim = 16\n").unwrap();
    let conf = conf.to_str().unwrap();
    assert!(mmel(dir.path(), &["--config", conf, "gen-planted"]).status.success());
    let o = mmel(dir.path(), &["--config", conf, "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("10 mentions linked"), "{}", stdout(&o));
}

#[test]
fn stages_chain_through_the_work_dir() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = SMALL.to_vec();
        all.extend_from_slice(&["--seed", "2"]);
        all.extend_from_slice(args);
        let o = mmel(dir.path(), &all);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    assert!(run(&["gen-planted"]).contains("10 mentions, 60 entities"));
    assert!(run(&["ingest"]).contains("ingested 10 mentions"));
    assert!(run(&["build-graph"]).contains("graph: 70 nodes"));
    assert!(run(&["train-teacher", "--epochs", "3"]).contains("teacher epoch 2"));
    assert!(run(&["train-student", "--epochs", "3", "--lambda", "0.5"]).contains("student epoch 2"));
    assert!(run(&["synthesize"]).contains("encoded 70 nodes"));
    assert!(run(&["induce-tree"]).contains("tree written"));
    let linked = run(&["link"]);
    assert!(linked.contains("linked 10 mentions") && linked.contains("Hit@1"), "{linked}");
    let table = run(&["eval", "--k", "1,3"]);
    assert!(table.contains("| 3 |"), "{table}");
    assert!(dir.path().join("results.jsonl").exists());
    assert!(dir.path().join("teacher.ckpt").exists());

    let identity = run(&["link", "--tree", "identity"]);
    assert!(identity.contains("linked 10 mentions"), "{identity}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmel(dir.path(), &["--set", "no_such_key=1", "gen-planted"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn theorem_checks_report_counts() {
    let dir = tempfile::tempdir().unwrap();
    let o = mmel(dir.path(), &["check-theorems", "--matrices", "10", "--trials", "20000", "--samples", "500"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("10/10") && out.contains("0/500"), "{out}");
}
