use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use durable_core::metrics::emit_ecdf;

fn durable(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_durable")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_outputs_that_verify() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("hello.cfg"), "workload=hello_seq\nmode=conservative\nnodes=2\npartitions=8\nrequests=100\n")
        .unwrap();
    let o = durable(&["run", "hello.cfg", "--out", "out"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("count 100") && text.contains("median") && text.contains("p95") && text.contains("throughput"));
    for f in ["trace.txt", "metrics.csv", "ecdf.csv", "throughput.csv", "flushes.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let v = durable(&["verify", "out/trace.txt"], dir.path());
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));

    let e = durable(&["ecdf", "out/metrics.csv", "--out", "e.csv"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    let csv = fs::read_to_string(dir.path().join("e.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(dir.path().join("out/ecdf.csv")).unwrap());
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 101);
    assert!(rows[100].ends_with(",1.0"));
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("c.json"),
        r#"{"workload": "bank:10:100:30", "mode": "global", "nodes": 2, "partitions": 4, "seed": 3,
            "faults": {"crashes": "0.05:1"}}"#,
    )
    .unwrap();
    let o = durable(&["run", "c.json"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("count 30"));
    assert!(stdout(&o).contains("crashes 1"));
}

#[test]
fn invalid_config_fails_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "nodes=4\nmode=reckless\n").unwrap();
    let o = durable(&["run", "bad.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mode"), "{}", stderr(&o));
    let o = durable(&["run", "missing.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_names_the_broken_bullet() {
    let dir = tempfile::tempdir().unwrap();
    // a persisted step consumes the output of a step that only completed
    let trace = "V 0 input persisted\n\
                 V 1 step:1:A@k completed\n\
                 V 2 step:1:B@k persisted\n\
                 E msg 0 1 c0.0.1\n\
                 E msg 1 2 p0.1.0\n\
                 COMPLETE false\n";
    fs::write(dir.path().join("bad.txt"), trace).unwrap();
    let o = durable(&["verify", "bad.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("bullet 1 at v2"), "{}", stdout(&o));

    fs::write(dir.path().join("fixed.txt"), trace.replace("V 1 step:1:A@k completed", "V 1 step:1:A@k persisted"))
        .unwrap();
    assert_eq!(durable(&["verify", "fixed.txt"], dir.path()).status.code(), Some(0));
}

#[test]
fn verify_empty_and_malformed_traces() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let o = durable(&["verify", "empty.txt"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));

    fs::write(dir.path().join("junk.txt"), "V 0 input persisted\nV 1 sideways persisted\n").unwrap();
    let o = durable(&["verify", "junk.txt"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn ecdf_of_nothing_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "request,instance,start_us,completion_us,latency_us,flush_waits\n0,X@a,5,,,0\n")
        .unwrap();
    let o = durable(&["ecdf", "m.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty sample"), "{}", stderr(&o));
    assert!(emit_ecdf(&[]).is_err());
}

#[test]
fn scaleout_rejects_other_node_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.cfg"), "nodes=3\n").unwrap();
    let o = durable(&["scaleout", "s.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("4 or 8"), "{}", stderr(&o));
}

#[test]
fn scaleout_reports_moves_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("s.cfg"), "nodes=4\nclients=40\nduration=4\nrebalance_at=2\n").unwrap();
    let o = durable(&["scaleout", "s.cfg", "--out", "so"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("moved 24 of 32 partitions"), "{}", stdout(&o));
    assert!(dir.path().join("so/throughput.csv").exists());
}
