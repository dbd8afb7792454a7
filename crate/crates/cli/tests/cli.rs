use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wfio::fixtures;
use wfio::sim::{generate_run, inject_loss, random_config, LossModel, SimRun};
use wfio::OpKind;

const TWO_TASKS: &str = r#"
seed = 1

[[tasks]]
name = "MAKE_INDEX (ref)"
node = "n1"
container = true
processes = 1

[[tasks.io]]
file = "index.bin"
mode = "write"
ops = 5
process = 1

[[tasks]]
name = "ALIGN (s1)"
node = "n1"

[[tasks.io]]
file = "index.bin"
mode = "read"
from_task = "MAKE_INDEX (ref)"
ops = 5
"#;

fn wfio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wfio")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn digest(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn node_dir(root: &Path, name: &str, io: &str, fork: &str) -> PathBuf {
    let d = root.join(name);
    fs::create_dir_all(&d).unwrap();
    fs::write(d.join("io_trace.csv"), io).unwrap();
    fs::write(d.join("fork_trace.csv"), fork).unwrap();
    d
}

fn report_args(dir: &Path, run: &SimRun) -> Vec<String> {
    let mut args = vec!["report".to_string()];
    for n in &run.nodes {
        args.push("--trace-dir".into());
        args.push(p(&dir.join(&n.node_id)).into());
    }
    args.extend(["--nextflow-log".into(), p(&dir.join("nextflow.log")).into()]);
    args.extend(["--pod-meta".into(), p(&dir.join("pods.tsv")).into()]);
    args
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn simulate_writes_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TWO_TASKS).unwrap();
    let out_dir = tmp.path().join("run");
    let out = wfio(&["simulate", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let mut names: Vec<String> = fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["ground_truth.csv", "k8s_events.txt", "n1", "nextflow.log", "pods.tsv"]
    );
    assert!(out_dir.join("n1/io_trace.csv").exists() && out_dir.join("n1/fork_trace.csv").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("tasks 2"));
}

#[test]
fn malformed_config_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, TWO_TASKS.replace("ops = 5\nprocess = 1", "opz = 5")).unwrap();
    let out = wfio(&["simulate", "--config", p(&cfg), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("opz"));
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, TWO_TASKS).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = wfio(&["simulate", "--config", p(&cfg), "--out", p(d), "--seed", "9", "--drop", "0.2"]);
        assert!(out.status.success());
    }
    assert_eq!(digest(&a), digest(&b));
    assert!(a.join("drop_ledger.csv").exists());
}

#[test]
fn check_clean_and_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let d = node_dir(tmp.path(), "n1", fixtures::IO_TRACE, fixtures::FORK_TRACE);
    assert_eq!(wfio(&["check", "--trace-dir", p(&d)]).status.code(), Some(0));

    let run = generate_run(&random_config(1)).unwrap();
    run.write_to(&tmp.path().join("sim")).unwrap();
    let mut args = vec!["check".to_string()];
    for n in &run.nodes {
        args.push("--trace-dir".into());
        args.push(p(&tmp.path().join("sim").join(&n.node_id)).into());
    }
    let out = Command::new(env!("CARGO_BIN_EXE_wfio")).args(&args).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn check_flags_duplicate_open() {
    let tmp = tempfile::tempdir().unwrap();
    let io = format!("{}\n{}\n", fixtures::IO_OPEN_LINE, fixtures::IO_OPEN_LINE.replace("1714067937.744", "1714067938.001"));
    let d = node_dir(tmp.path(), "n1", &io, fixtures::FORK_TRACE);
    let out = wfio(&["check", "--trace-dir", p(&d), "--format", "text"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("handle 35625"));
}

#[test]
fn check_reports_parse_failures_per_file() {
    let tmp = tempfile::tempdir().unwrap();
    let d = node_dir(tmp.path(), "n1", "1.0, 1.0, x\n", fixtures::FORK_TRACE);
    let out = wfio(&["check", "--trace-dir", p(&d)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("io_trace.csv"));
}

#[test]
fn report_byte_totals_match_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let run = generate_run(&random_config(31)).unwrap();
    run.write_to(tmp.path()).unwrap();
    let doc = json(&wfio(&report_args(tmp.path(), &run).iter().map(String::as_str).collect::<Vec<_>>()));

    let mut expected: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for n in &run.nodes {
        for (i, e) in n.io_events.iter().enumerate() {
            let t = expected.entry(n.io_task[i]).or_default();
            match e.kind {
                OpKind::Read => t.0 += e.size,
                OpKind::Write => t.1 += e.size,
                _ => {}
            }
        }
    }
    for task in doc["tasks"].as_array().unwrap() {
        let id = task["record"]["task_id"].as_u64().unwrap();
        let files = task["profile"]["files"].as_array().unwrap();
        let read: u64 = files.iter().map(|f| f["bytes_read"].as_u64().unwrap()).sum();
        let written: u64 = files.iter().map(|f| f["bytes_written"].as_u64().unwrap()).sum();
        assert_eq!((read, written), expected[&id], "task {id}");
    }
}

#[test]
fn report_loss_section_matches_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = generate_run(&random_config(12)).unwrap();
    let run = inject_loss(&clean, &LossModel::uniform(0.1, 0), 4);
    run.write_to(tmp.path()).unwrap();
    let doc = json(&wfio(&report_args(tmp.path(), &run).iter().map(String::as_str).collect::<Vec<_>>()));
    let ledger = fs::read_to_string(tmp.path().join("drop_ledger.csv")).unwrap();
    let io_drops = ledger.lines().skip(1).filter(|l| l.split(',').nth(1) == Some("io")).count() as u64;
    assert!(io_drops > 0);
    assert_eq!(doc["loss"]["reported_lost"].as_u64(), Some(io_drops));
}

#[test]
fn raw_report_without_log() {
    let tmp = tempfile::tempdir().unwrap();
    let run = generate_run(&random_config(2)).unwrap();
    run.write_to(tmp.path()).unwrap();
    let mut args = vec!["report".to_string(), "--raw".into()];
    for n in &run.nodes {
        args.extend(["--trace-dir".into(), p(&tmp.path().join(&n.node_id)).into()]);
    }
    let doc = json(&wfio(&args.iter().map(String::as_str).collect::<Vec<_>>()));
    assert!(doc["tasks"].is_null());
    assert_eq!(doc["nodes"].as_array().unwrap().len(), run.nodes.len());
}

#[test]
fn report_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let run = generate_run(&random_config(3)).unwrap();
    run.write_to(&tmp.path().join("run")).unwrap();
    let out_dir = tmp.path().join("out");
    let mut args = report_args(&tmp.path().join("run"), &run);
    args.extend(["--out".into(), p(&out_dir).into(), "--buckets".into(), "10".into()]);
    let out = wfio(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["report.json", "histogram.csv", "bulkiness.csv", "timelines.csv", "lineage.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let hist = fs::read_to_string(out_dir.join("histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);
}

#[test]
fn bad_marker_override_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let d = node_dir(tmp.path(), "n1", fixtures::IO_TRACE, fixtures::FORK_TRACE);
    let out = wfio(&["report", "--trace-dir", p(&d), "--markers", "a/b"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn associate_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let io = format!("{}\n{}", fixtures::marker_open_line(), fixtures::IO_TRACE);
    let d = node_dir(tmp.path(), "n1", &io, fixtures::FORK_TRACE);
    let log = tmp.path().join("nextflow.log");
    fs::write(&log, fixtures::NEXTFLOW_LOG).unwrap();
    let doc = json(&wfio(&["associate", "--trace-dir", p(&d), "--nextflow-log", p(&log)]));
    assert_eq!(doc["tasks"][0]["task_id"], 6);
    assert_eq!(doc["tasks"][0]["events"], 3);
    assert_eq!(doc["orphans"], 0);
}
