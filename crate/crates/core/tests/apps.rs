use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use cdi_core::apps::orchestrator::{
    output_locator, run_worker, tasks, Client, DataPlane, ObjectStore, Orchestrator,
    OrchestratorConfig, Status, Strategy, WorkerConfig, DEFAULT_POLL, FIRST_WORKER_ID,
    SCHEDULER_ID,
};
use cdi_core::apps::pipeline::{oracle, run_local, PipelineParams, Topology};
use cdi_core::cluster::LocalCluster;

fn params(run: &str, frames: u64, workers: usize) -> PipelineParams {
    PipelineParams {
        frames,
        workers,
        frame_size: 4096,
        run: run.into(),
    }
}

#[test]
fn pipeline_matches_oracle() {
    let cluster = LocalCluster::start(1).unwrap();
    let p = params("orc", 100, 3);
    let out = run_local(&cluster, &p, Topology::Single).unwrap();
    assert_eq!(out, oracle(100, 4096));
}

#[test]
fn pipeline_topologies_agree() {
    let single = LocalCluster::start(1).unwrap();
    let multi = LocalCluster::start(2).unwrap();
    let p = params("topo", 24, 2);
    let a = run_local(&single, &p, Topology::Single).unwrap();
    let b = run_local(&multi, &p, Topology::Multi).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 24);
    // Every slot is gone once the run completes.
    assert!(single.controller().snapshot().is_empty());
    assert!(multi.controller().snapshot().is_empty());
}

#[test]
fn pipeline_fewer_frames_than_workers() {
    let cluster = LocalCluster::start(1).unwrap();
    let p = params("few", 2, 4);
    assert_eq!(run_local(&cluster, &p, Topology::Single).unwrap(), oracle(2, 4096));
}

struct Setup {
    _cluster: LocalCluster,
    orch: Orchestrator,
    addr: String,
    _server: cdi_core::net::Server,
    workers: Vec<thread::JoinHandle<std::io::Result<u64>>>,
    _dir: tempfile::TempDir,
    store: Arc<ObjectStore>,
}

fn setup(strategy: Strategy, plane: DataPlane, workers: usize, fail_task: Option<&str>) -> Setup {
    let cluster = LocalCluster::start(2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(ObjectStore::open(dir.path(), Duration::ZERO).unwrap());
    let session = match plane {
        DataPlane::Cdi => Some(cluster.session(SCHEDULER_ID, 0).unwrap()),
        DataPlane::Store => None,
    };
    let orch = Orchestrator::new(OrchestratorConfig {
        strategy,
        plane,
        store: store.clone(),
        session,
    });
    let server = orch.serve(TcpListener::bind("127.0.0.1:0").unwrap()).unwrap();
    let addr = server.local_addr().to_string();
    let handles = (0..workers)
        .map(|i| {
            let id = FIRST_WORKER_ID + i as u64;
            let cfg = WorkerConfig {
                id,
                orchestrator: addr.clone(),
                plane,
                session: match plane {
                    DataPlane::Cdi => Some(cluster.session(id, i % 2).unwrap()),
                    DataPlane::Store => None,
                },
                store: Some(store.clone()),
                poll: DEFAULT_POLL,
                fail_task: fail_task.map(str::to_string),
            };
            thread::spawn(move || run_worker(cfg))
        })
        .collect();
    Setup {
        _cluster: cluster,
        orch,
        addr,
        _server: server,
        workers: handles,
        _dir: dir,
        store,
    }
}

impl Setup {
    fn finish(self) -> u64 {
        self.orch.shutdown();
        self.workers.into_iter().map(|w| w.join().unwrap().unwrap()).sum()
    }
}

fn input() -> Vec<u8> {
    (0..100 * 1024u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect()
}

fn expected() -> Vec<u8> {
    let mut b = input();
    for t in tasks::DEFAULT_TASKS {
        tasks::apply(t, &mut b).unwrap();
    }
    b
}

fn default_tasks() -> Vec<String> {
    tasks::DEFAULT_TASKS.iter().map(|s| s.to_string()).collect()
}

#[test]
fn orchestrator_planes_produce_the_same_output() {
    for (strategy, plane, transfers) in [
        (Strategy::Affinity, DataPlane::Cdi, 2),
        (Strategy::Metrics, DataPlane::Cdi, 4),
        (Strategy::Affinity, DataPlane::Store, 0),
        (Strategy::Metrics, DataPlane::Store, 0),
    ] {
        let s = setup(strategy, plane, 2, None);
        s.store.put("in/img", &input()).unwrap();
        let mut client = Client::connect(&s.addr).unwrap();
        for _ in 0..3 {
            let report = client.submit(default_tasks(), "in/img").unwrap();
            assert_eq!(report.status, Status::Completed, "{strategy:?} {plane:?} {report:?}");
            assert_eq!(report.transfers, transfers, "{strategy:?} {plane:?}");
            assert_eq!(report.output.as_deref(), Some(output_locator(report.workflow_id).as_str()));
            assert_eq!(s.store.get(&output_locator(report.workflow_id)).unwrap(), expected());
        }
        assert_eq!(s.finish(), 9);
    }
}

#[test]
fn orchestrator_rejects_unknown_tasks() {
    let s = setup(Strategy::Metrics, DataPlane::Cdi, 1, None);
    s.store.put("in/img", &input()).unwrap();
    let report = Client::connect(&s.addr)
        .unwrap()
        .submit(vec!["deblur".into(), "sharpen".into()], "in/img")
        .unwrap();
    assert_eq!(report.status, Status::Rejected);
    assert_eq!(s.finish(), 0);
}

#[test]
fn orchestrator_reports_task_failure_and_cleans_up() {
    let s = setup(Strategy::Metrics, DataPlane::Cdi, 2, Some("denoise"));
    s.store.put("in/img", &input()).unwrap();
    let report = Client::connect(&s.addr).unwrap().submit(default_tasks(), "in/img").unwrap();
    assert_eq!(report.status, Status::Failed);
    assert!(report.error.unwrap().contains("denoise"));
    assert!(s.store.get(&output_locator(report.workflow_id)).is_err());
    assert!(s._cluster.controller().snapshot().is_empty());
    s.finish();
}

#[test]
fn orchestrator_missing_input_fails() {
    let s = setup(Strategy::Affinity, DataPlane::Cdi, 1, None);
    let report = Client::connect(&s.addr).unwrap().submit(default_tasks(), "in/none").unwrap();
    assert_eq!(report.status, Status::Failed);
    s.finish();
}

#[test]
fn orchestrator_parks_until_a_worker_arrives() {
    let mut s = setup(Strategy::Affinity, DataPlane::Cdi, 0, None);
    s.store.put("in/img", &input()).unwrap();
    let addr = s.addr.clone();
    let submit = thread::spawn(move || Client::connect(&addr).unwrap().submit(default_tasks(), "in/img").unwrap());
    thread::sleep(Duration::from_millis(100));
    let cfg = WorkerConfig {
        id: FIRST_WORKER_ID,
        orchestrator: s.addr.clone(),
        plane: DataPlane::Cdi,
        session: Some(s._cluster.session(FIRST_WORKER_ID, 1).unwrap()),
        store: None,
        poll: DEFAULT_POLL,
        fail_task: None,
    };
    s.workers.push(thread::spawn(move || run_worker(cfg)));
    let report = submit.join().unwrap();
    assert_eq!(report.status, Status::Completed);
    assert_eq!(s.store.get(&output_locator(report.workflow_id)).unwrap(), expected());
    assert_eq!(s.finish(), 3);
}
