//! Decentralized workflow orchestrator.
//!
//! A scheduler (container [`SCHEDULER_ID`]) accepts workflow submissions,
//! fetches the input from the object store into a CDI object and routes the
//! object through a sequence of tasks run by worker processes. Workers poll
//! per-worker queues over a JSON-lines TCP protocol. After each task the
//! scheduler tells the worker to keep the object (affinity), pass it to
//! another worker (metrics) or hand it back for upload.
//!
//! The `store` data plane is the baseline: no CDI objects, every task
//! downloads its input from the store and uploads its output.

pub mod store;
pub mod tasks;
mod worker;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use store::ObjectStore;
pub use worker::{run_worker, WorkerConfig};

use crate::model::{CdiKey, ContainerId, ReturnCode};
use crate::net::Server;
use crate::sdk::{CdiHandle, Session};

pub const SCHEDULER_ID: u64 = 100;
pub const FIRST_WORKER_ID: u64 = 101;
pub const DEFAULT_POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Keep every task of a workflow on the worker that ran the first one.
    Affinity,
    /// Place each task on the least loaded worker.
    Metrics,
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "affinity" => Ok(Strategy::Affinity),
            "metrics" => Ok(Strategy::Metrics),
            _ => Err(format!("unknown strategy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataPlane {
    Cdi,
    Store,
}

impl FromStr for DataPlane {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cdi" => Ok(DataPlane::Cdi),
            "store" | "store-roundtrip" => Ok(DataPlane::Store),
            _ => Err(format!("unknown data plane {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskInstruction {
    pub workflow_id: u64,
    pub task_name: String,
    pub step_index: usize,
    /// Object carrying the data on the CDI plane.
    pub cdi_key: Option<String>,
    /// Store locators on the store plane.
    pub input: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkerMetrics {
    pub worker_id: ContainerId,
    pub queue_depth: u32,
    /// Tasks running or awaiting hand-off.
    pub running: u32,
}

/// Least loaded worker by `(queue_depth, running)`, ties to the lowest id.
pub fn pick_worker(metrics: &[WorkerMetrics]) -> Option<ContainerId> {
    metrics
        .iter()
        .min_by_key(|m| (m.queue_depth, m.running, m.worker_id))
        .map(|m| m.worker_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    /// Keep ownership; the next task is queued for this worker.
    Retain,
    TransferTo(u64),
    /// Transfer the object back to the scheduler.
    Return,
    /// Nothing to hand over (store plane).
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Hello {
        worker: u64,
    },
    Poll {
        worker: u64,
    },
    Done {
        worker: u64,
        workflow_id: u64,
        step_index: usize,
        ok: bool,
        error: Option<String>,
    },
    HandedOff {
        worker: u64,
        workflow_id: u64,
    },
    Submit {
        tasks: Vec<String>,
        input: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    Ack,
    Instruction { instruction: Option<TaskInstruction> },
    Directive { directive: Directive },
    Shutdown,
    Error { message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Completed,
    Failed,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkflowReport {
    pub workflow_id: u64,
    pub status: Status,
    pub latency_ms: f64,
    pub transfers: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

pub fn workflow_key(id: u64) -> CdiKey {
    CdiKey::new(format!("wf-{id}")).expect("short key")
}

pub fn output_locator(id: u64) -> String {
    format!("out/wf-{id}")
}

#[derive(Clone)]
pub struct OrchestratorConfig {
    pub strategy: Strategy,
    pub plane: DataPlane,
    pub store: Arc<ObjectStore>,
    /// Scheduler's CDI session; required on the CDI plane.
    pub session: Option<Session>,
}

#[derive(Default)]
struct WorkerState {
    queue: VecDeque<TaskInstruction>,
    /// Hand-offs announced to this worker but not yet queued.
    reserved: u32,
    running: u32,
}

enum Next {
    Step { worker: u64, step: usize },
    Return,
}

struct Workflow {
    tasks: Vec<String>,
    started: Instant,
    transfers: u32,
    failed: Option<String>,
    next: Option<Next>,
    done: mpsc::Sender<WorkflowReport>,
}

#[derive(Default)]
struct State {
    workers: BTreeMap<u64, WorkerState>,
    workflows: HashMap<u64, Workflow>,
    parked: Vec<u64>,
    /// Input locators of parked store-plane workflows.
    parked_inputs: HashMap<u64, String>,
    shutdown: bool,
}

impl State {
    fn pick(&self) -> Option<u64> {
        let metrics: Vec<WorkerMetrics> = self
            .workers
            .iter()
            .map(|(id, w)| WorkerMetrics {
                worker_id: ContainerId(*id),
                queue_depth: w.queue.len() as u32 + w.reserved,
                running: w.running,
            })
            .collect();
        pick_worker(&metrics).map(|c| c.0)
    }
}

struct Inner {
    cfg: OrchestratorConfig,
    state: Mutex<State>,
    handles: Mutex<HashMap<u64, CdiHandle>>,
    next_id: AtomicU64,
}

#[derive(Clone)]
pub struct Orchestrator {
    inner: Arc<Inner>,
}

impl Orchestrator {
    pub fn new(cfg: OrchestratorConfig) -> Orchestrator {
        assert!(
            cfg.plane == DataPlane::Store || cfg.session.is_some(),
            "the CDI plane needs a scheduler session"
        );
        Orchestrator {
            inner: Arc::new(Inner {
                cfg,
                state: Mutex::new(State::default()),
                handles: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn store(&self) -> &ObjectStore {
        &self.inner.cfg.store
    }

    /// Make `Poll` answer `Shutdown` from now on.
    pub fn shutdown(&self) {
        self.inner.state.lock().unwrap().shutdown = true;
    }

    /// Workers that have said hello.
    pub fn workers(&self) -> Vec<u64> {
        self.inner.state.lock().unwrap().workers.keys().copied().collect()
    }

    fn instruction(&self, id: u64, tasks: &[String], step: usize, input: Option<String>) -> TaskInstruction {
        let store = self.inner.cfg.plane == DataPlane::Store;
        let last = step + 1 == tasks.len();
        TaskInstruction {
            workflow_id: id,
            task_name: tasks[step].clone(),
            step_index: step,
            cdi_key: (!store).then(|| workflow_key(id).to_string()),
            input: if store { input } else { None },
            output: store.then(|| {
                if last {
                    output_locator(id)
                } else {
                    format!("work/wf-{id}/{step}")
                }
            }),
        }
    }

    fn report(&self, id: u64, wf: &Workflow, status: Status, output: Option<String>) {
        let _ = wf.done.send(WorkflowReport {
            workflow_id: id,
            status,
            latency_ms: wf.started.elapsed().as_secs_f64() * 1e3,
            transfers: wf.transfers,
            output,
            error: wf.failed.clone(),
        });
    }

    fn fail_early(&self, id: u64, started: Instant, error: String) -> WorkflowReport {
        WorkflowReport {
            workflow_id: id,
            status: Status::Failed,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            transfers: 0,
            output: None,
            error: Some(error),
        }
    }

    /// Run one workflow to completion.
    pub fn submit(&self, tasks: Vec<String>, input: &str) -> WorkflowReport {
        let started = Instant::now();
        if let Some(bad) = tasks.iter().find(|t| !tasks::is_known(t)) {
            return WorkflowReport {
                workflow_id: 0,
                status: Status::Rejected,
                latency_ms: 0.0,
                transfers: 0,
                output: None,
                error: Some(format!("unknown task {bad:?}")),
            };
        }
        if tasks.is_empty() {
            return WorkflowReport {
                workflow_id: 0,
                status: Status::Rejected,
                latency_ms: 0.0,
                transfers: 0,
                output: None,
                error: Some("no tasks".into()),
            };
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        let wf = Workflow {
            tasks,
            started,
            transfers: 0,
            failed: None,
            next: None,
            done: tx,
        };
        match self.inner.cfg.plane {
            DataPlane::Cdi => {
                let data = match self.store().get(input) {
                    Ok(d) => d,
                    Err(e) => return self.fail_early(id, started, format!("store miss {input}: {e}")),
                };
                let session = self.inner.cfg.session.as_ref().unwrap();
                let mut h = match session.create(&workflow_key(id), data.len() as u64) {
                    Ok((ReturnCode::Success, Some(h))) => h,
                    Ok((code, _)) => {
                        return self.fail_early(id, started, format!("create returned {code}"))
                    }
                    Err(e) => return self.fail_early(id, started, e.to_string()),
                };
                if let Err(e) = h.write(0, &data) {
                    let _ = h.destroy();
                    return self.fail_early(id, started, e.to_string());
                }
                self.inner.handles.lock().unwrap().insert(id, h);
                self.inner.state.lock().unwrap().workflows.insert(id, wf);
                self.dispatch_first(id);
            }
            DataPlane::Store => {
                let mut st = self.inner.state.lock().unwrap();
                st.workflows.insert(id, wf);
                match st.pick() {
                    Some(w) => {
                        let ins = self.instruction(id, &st.workflows[&id].tasks, 0, Some(input.to_string()));
                        st.workers.get_mut(&w).unwrap().queue.push_back(ins);
                    }
                    None => {
                        st.parked.push(id);
                        st.parked_inputs.insert(id, input.to_string());
                    }
                }
            }
        }
        rx.recv().unwrap_or_else(|_| self.fail_early(id, started, "scheduler dropped workflow".into()))
    }

    /// Send a freshly created object to its first worker.
    fn dispatch_first(&self, id: u64) {
        let worker = {
            let mut st = self.inner.state.lock().unwrap();
            match st.pick() {
                Some(w) => {
                    st.workers.get_mut(&w).unwrap().reserved += 1;
                    st.workflows.get_mut(&id).unwrap().transfers += 1;
                    w
                }
                None => {
                    st.parked.push(id);
                    return;
                }
            }
        };
        let transferred = {
            let mut handles = self.inner.handles.lock().unwrap();
            let h = handles.get_mut(&id).expect("handle for live workflow");
            h.transfer(ContainerId(worker))
        };
        let mut st = self.inner.state.lock().unwrap();
        st.workers.get_mut(&worker).unwrap().reserved -= 1;
        match transferred {
            Ok(()) => {
                let ins = self.instruction(id, &st.workflows[&id].tasks, 0, None);
                st.workers.get_mut(&worker).unwrap().queue.push_back(ins);
            }
            Err(e) => {
                let wf = st.workflows.get_mut(&id).unwrap();
                wf.transfers -= 1;
                wf.failed = Some(e.to_string());
                drop(st);
                self.finish(id);
            }
        }
    }

    fn hello(&self, worker: u64) {
        let parked = {
            let mut st = self.inner.state.lock().unwrap();
            st.workers.entry(worker).or_default();
            std::mem::take(&mut st.parked)
        };
        for id in parked {
            match self.inner.cfg.plane {
                DataPlane::Cdi => {
                    let me = self.clone();
                    thread::spawn(move || me.dispatch_first(id));
                }
                DataPlane::Store => {
                    let mut st = self.inner.state.lock().unwrap();
                    let input = st.parked_inputs.remove(&id);
                    let ins = self.instruction(id, &st.workflows[&id].tasks, 0, input);
                    st.workers.get_mut(&worker).unwrap().queue.push_back(ins);
                }
            }
        }
    }

    fn poll(&self, worker: u64) -> Response {
        let mut st = self.inner.state.lock().unwrap();
        if st.shutdown {
            return Response::Shutdown;
        }
        let w = st.workers.entry(worker).or_default();
        let instruction = w.queue.pop_front();
        if instruction.is_some() {
            w.running += 1;
        }
        Response::Instruction { instruction }
    }

    fn done(&self, worker: u64, id: u64, step: usize, ok: bool, error: Option<String>) -> Response {
        let store = self.inner.cfg.plane == DataPlane::Store;
        let mut st = self.inner.state.lock().unwrap();
        let Some(wf) = st.workflows.get_mut(&id) else {
            return Response::Error {
                message: format!("unknown workflow {id}"),
            };
        };
        let last = step + 1 == wf.tasks.len();
        if !ok {
            wf.failed = Some(error.unwrap_or_else(|| format!("task {} failed", wf.tasks[step])));
        }
        if store {
            if let Some(w) = st.workers.get_mut(&worker) {
                w.running -= 1;
            }
            if !ok || last {
                drop(st);
                self.finish(id);
                return Response::Directive {
                    directive: Directive::Release,
                };
            }
            let next = if self.inner.cfg.strategy == Strategy::Affinity {
                worker
            } else {
                st.pick().unwrap_or(worker)
            };
            let tasks = st.workflows[&id].tasks.clone();
            let prev = self.instruction(id, &tasks, step, None).output;
            let ins = self.instruction(id, &tasks, step + 1, prev);
            st.workers.entry(next).or_default().queue.push_back(ins);
            return Response::Directive {
                directive: Directive::Release,
            };
        }
        if !ok || last {
            let wf = st.workflows.get_mut(&id).unwrap();
            wf.next = Some(Next::Return);
            wf.transfers += 1;
            return Response::Directive {
                directive: Directive::Return,
            };
        }
        let next = match self.inner.cfg.strategy {
            Strategy::Affinity => worker,
            Strategy::Metrics => st.pick().unwrap_or(worker),
        };
        if next == worker {
            let tasks = st.workflows[&id].tasks.clone();
            let w = st.workers.get_mut(&worker).unwrap();
            w.running -= 1;
            w.queue.push_back(self.instruction(id, &tasks, step + 1, None));
            return Response::Directive {
                directive: Directive::Retain,
            };
        }
        st.workers.get_mut(&next).unwrap().reserved += 1;
        let wf = st.workflows.get_mut(&id).unwrap();
        wf.transfers += 1;
        wf.next = Some(Next::Step {
            worker: next,
            step: step + 1,
        });
        Response::Directive {
            directive: Directive::TransferTo(next),
        }
    }

    fn handed_off(&self, worker: u64, id: u64) -> Response {
        let mut st = self.inner.state.lock().unwrap();
        if let Some(w) = st.workers.get_mut(&worker) {
            w.running -= 1;
        }
        let Some(wf) = st.workflows.get_mut(&id) else {
            return Response::Error {
                message: format!("unknown workflow {id}"),
            };
        };
        match wf.next.take() {
            Some(Next::Step { worker: to, step }) => {
                let tasks = wf.tasks.clone();
                let ins = self.instruction(id, &tasks, step, None);
                let w = st.workers.get_mut(&to).unwrap();
                w.reserved -= 1;
                w.queue.push_back(ins);
            }
            Some(Next::Return) => {
                drop(st);
                let me = self.clone();
                thread::spawn(move || me.finish(id));
            }
            None => {}
        }
        Response::Ack
    }

    /// Collect the result of a finished workflow and release its object.
    fn finish(&self, id: u64) {
        let wf = self.inner.state.lock().unwrap().workflows.remove(&id);
        let Some(mut wf) = wf else { return };
        if self.inner.cfg.plane == DataPlane::Store {
            let (status, output) = match wf.failed {
                None => (Status::Completed, Some(output_locator(id))),
                Some(_) => (Status::Failed, None),
            };
            self.report(id, &wf, status, output);
            return;
        }
        let handle = self.inner.handles.lock().unwrap().remove(&id);
        let Some(mut h) = handle else { return };
        let result = h.access().and_then(|_| {
            if wf.failed.is_some() {
                return Ok(None);
            }
            let data = h.read(0, h.capacity().unwrap_or(0))?;
            Ok(Some(data))
        });
        let status = match result {
            Ok(Some(data)) => match self.store().put(&output_locator(id), &data) {
                Ok(()) => Status::Completed,
                Err(e) => {
                    wf.failed = Some(format!("upload failed: {e}"));
                    Status::Failed
                }
            },
            Ok(None) => Status::Failed,
            Err(e) => {
                wf.failed = Some(e.to_string());
                Status::Failed
            }
        };
        if let Err(e) = h.destroy() {
            log::warn!("workflow {id}: destroy failed: {e}");
        }
        let output = (status == Status::Completed).then(|| output_locator(id));
        self.report(id, &wf, status, output);
    }

    pub fn handle(&self, req: Request) -> Response {
        match req {
            Request::Hello { worker } => {
                self.hello(worker);
                Response::Ack
            }
            Request::Poll { worker } => self.poll(worker),
            Request::Done {
                worker,
                workflow_id,
                step_index,
                ok,
                error,
            } => self.done(worker, workflow_id, step_index, ok, error),
            Request::HandedOff {
                worker,
                workflow_id,
            } => self.handed_off(worker, workflow_id),
            Request::Submit { .. } => Response::Error {
                message: "submit is answered with a report".into(),
            },
        }
    }

    fn serve_connection(&self, stream: TcpStream) -> io::Result<()> {
        let mut writer = stream.try_clone()?;
        for line in BufReader::new(stream).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let out = match serde_json::from_str::<Request>(&line) {
                Ok(Request::Submit { tasks, input }) => {
                    serde_json::to_string(&self.submit(tasks, &input))
                }
                Ok(req) => serde_json::to_string(&self.handle(req)),
                Err(e) => serde_json::to_string(&Response::Error {
                    message: format!("bad request: {e}"),
                }),
            }
            .map_err(io::Error::other)?;
            writer.write_all(out.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn serve(&self, listener: TcpListener) -> io::Result<Server> {
        let me = self.clone();
        Server::spawn(listener, "orchestrator", move |s| {
            if let Err(e) = me.serve_connection(s) {
                log::debug!("orchestrator connection closed: {e}");
            }
        })
    }
}

/// JSON-lines client for the orchestrator protocol.
pub struct Client {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
}

impl Client {
    pub fn connect(addr: &str) -> io::Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn exchange<T: for<'de> Deserialize<'de>>(&mut self, req: &Request) -> io::Result<T> {
        let mut line = serde_json::to_string(req).map_err(io::Error::other)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        serde_json::from_str(&reply).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn call(&mut self, req: &Request) -> io::Result<Response> {
        self.exchange(req)
    }

    pub fn submit(&mut self, tasks: Vec<String>, input: &str) -> io::Result<WorkflowReport> {
        self.exchange(&Request::Submit {
            tasks,
            input: input.to_string(),
        })
    }
}
