use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Stdio};

use cdi_core::apps::pipeline::{format_output, oracle};
use cdi_core::bench::{from_csv, Mode, CSV_HEADER};

const BENCH: &str = env!("CARGO_BIN_EXE_cdi-bench");
const PIPELINE: &str = env!("CARGO_BIN_EXE_cdi-pipeline");
const ORCHESTRATOR: &str = env!("CARGO_BIN_EXE_cdi-orchestrator");
const CONTROLLER: &str = env!("CARGO_BIN_EXE_cdi-controller");
const MINION: &str = env!("CARGO_BIN_EXE_cdi-minion");

/// A daemon killed on drop, with the endpoint from its first stdout line.
struct Daemon {
    child: Child,
    endpoint: String,
}

impl Daemon {
    fn start(cmd: &mut Command) -> Daemon {
        let mut child = cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).spawn().unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let endpoint = line.split_whitespace().last().expect("announcement").to_string();
        Daemon { child, endpoint }
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn bench_rejects_bad_configs() {
    for args in [
        vec!["--iters=0"],
        vec!["--iters=5", "--warmup=5"],
        vec!["--sizes=10k,1x"],
        vec!["--sizes=1m,10k"],
        vec!["--mode=rdma"],
    ] {
        let out = Command::new(BENCH).args(&args).output().unwrap();
        assert!(!out.status.success(), "{args:?} accepted");
        assert!(!out.stderr.is_empty(), "{args:?} gave no reason");
    }
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let out = Command::new(BENCH)
        .args(["--mode=shm,baseline-framed", "--sizes=4k,64k", "--iters=12", "--warmup=2"])
        .arg(format!("--out={}", csv.display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    let rows = from_csv(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.mean_ms > 0.0 && r.p50_ms <= r.p99_ms));
    assert_eq!(rows.iter().filter(|r| r.mode == Mode::Shm).count(), 2);
    assert!(String::from_utf8_lossy(&out.stdout).contains("baseline-framed"));
}

#[test]
fn pipeline_runs_against_external_daemons() {
    let controller = Daemon::start(Command::new(CONTROLLER).arg("--listen=127.0.0.1:0"));
    let minions: Vec<Daemon> = (0..2)
        .map(|h| {
            Daemon::start(Command::new(MINION).args([
                format!("--host-id=ext{h}"),
                format!("--controller={}", controller.endpoint),
                "--budget=64m".into(),
            ]))
        })
        .collect();
    let endpoints = minions.iter().map(|m| m.endpoint.as_str()).collect::<Vec<_>>().join(",");
    let out = Command::new(PIPELINE)
        .args(["--frames=12", "--workers=3", "--size=4096", "--topology=multi"])
        .arg(format!("--controller={}", controller.endpoint))
        .arg(format!("--minions={endpoints}"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout), format_output(&oracle(12, 4096)));
}

#[test]
fn pipeline_with_no_frames_prints_nothing() {
    let out = Command::new(PIPELINE).args(["--frames=0", "--workers=2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
}

#[test]
fn orchestrator_rejects_unknown_task() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let input = dir.path().join("input.bin");
    std::fs::write(&input, vec![3u8; 4096]).unwrap();
    let put = Command::new(ORCHESTRATOR)
        .args(["put", "--locator=in/x"])
        .arg(format!("--store-dir={}", store.display()))
        .arg(format!("--file={}", input.display()))
        .status()
        .unwrap();
    assert!(put.success());
    let orch = Daemon::start(
        Command::new(ORCHESTRATOR)
            .args(["serve", "--workers=1", "--store-latency-ms=0"])
            .arg(format!("--store-dir={}", store.display())),
    );
    let submit = |tasks: &str| {
        Command::new(ORCHESTRATOR)
            .args(["submit", "--input=in/x"])
            .arg(format!("--orchestrator={}", orch.endpoint))
            .arg(format!("--tasks={tasks}"))
            .output()
            .unwrap()
    };
    let bad = submit("deblur,sharpen");
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("\"Rejected\""));
    let good = submit("classify");
    assert!(good.status.success(), "{}", String::from_utf8_lossy(&good.stderr));
    assert!(String::from_utf8_lossy(&good.stdout).contains("\"Completed\""));
}
