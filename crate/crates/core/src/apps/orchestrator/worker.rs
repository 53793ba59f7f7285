//! Worker loop: poll the scheduler, run tasks, follow hand-off directives.

use std::collections::HashMap;
use std::io;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::store::ObjectStore;
use super::tasks::{self, TaskError};
use super::{Client, DataPlane, Directive, Request, Response, TaskInstruction, SCHEDULER_ID};
use crate::model::{CdiKey, ContainerId, ReturnCode};
use crate::sdk::{CdiHandle, Session};

#[derive(Clone)]
pub struct WorkerConfig {
    pub id: u64,
    pub orchestrator: String,
    pub plane: DataPlane,
    /// Required on the CDI plane.
    pub session: Option<Session>,
    /// Required on the store plane.
    pub store: Option<Arc<ObjectStore>>,
    pub poll: Duration,
    /// Report this task as failed instead of running it.
    pub fail_task: Option<String>,
}

struct Worker {
    cfg: WorkerConfig,
    client: Client,
    held: HashMap<u64, CdiHandle>,
}

fn io_err(e: impl std::fmt::Display) -> io::Error {
    io::Error::other(e.to_string())
}

fn run_task(fail: Option<&str>, name: &str, data: &mut [u8]) -> Result<(), TaskError> {
    if fail == Some(name) {
        return Err(TaskError::Failed(name.to_string()));
    }
    tasks::apply(name, data)
}

impl Worker {
    fn store_task(&self, ins: &TaskInstruction) -> Result<(), String> {
        let store = self.cfg.store.as_ref().ok_or("worker has no store")?;
        let input = ins.input.as_deref().ok_or("instruction without input")?;
        let output = ins.output.as_deref().ok_or("instruction without output")?;
        let mut data = store.get(input).map_err(|e| format!("get {input}: {e}"))?;
        run_task(self.cfg.fail_task.as_deref(), &ins.task_name, &mut data).map_err(|e| e.to_string())?;
        store.put(output, &data).map_err(|e| format!("put {output}: {e}"))
    }

    fn handle_for(&mut self, ins: &TaskInstruction) -> Result<&mut CdiHandle, String> {
        if !self.held.contains_key(&ins.workflow_id) {
            let session = self.cfg.session.as_ref().expect("CDI plane needs a session");
            let key = CdiKey::new(ins.cdi_key.clone().unwrap_or_default())
                .map_err(|e| e.to_string())?;
            match session.use_key(&key).map_err(|e| e.to_string())? {
                (ReturnCode::Success, Some(h)) => {
                    self.held.insert(ins.workflow_id, h);
                }
                (code, _) => return Err(format!("use returned {code}")),
            }
        }
        Ok(self.held.get_mut(&ins.workflow_id).unwrap())
    }

    fn cdi_task(&mut self, ins: &TaskInstruction) -> Result<(), String> {
        let fail = self.cfg.fail_task.clone();
        let h = self.handle_for(ins)?;
        h.access().map_err(|e| e.to_string())?;
        h.with_bytes_mut(|b| run_task(fail.as_deref(), &ins.task_name, b))
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())
    }

    fn hand_off(&mut self, workflow: u64, to: u64) -> io::Result<()> {
        if let Some(mut h) = self.held.remove(&workflow) {
            let mut attempts = 0;
            while let Err(e) = h.transfer(ContainerId(to)) {
                attempts += 1;
                log::warn!("worker {}: transfer of workflow {workflow} to {to} failed: {e}", self.cfg.id);
                if attempts == 3 {
                    break;
                }
                if h.access().is_err() {
                    break;
                }
            }
        }
        match self.client.call(&Request::HandedOff {
            worker: self.cfg.id,
            workflow_id: workflow,
        })? {
            Response::Error { message } => Err(io_err(message)),
            _ => Ok(()),
        }
    }

    fn execute(&mut self, ins: TaskInstruction) -> io::Result<()> {
        let outcome = match self.cfg.plane {
            DataPlane::Store => self.store_task(&ins),
            DataPlane::Cdi => self.cdi_task(&ins),
        };
        if let Err(e) = &outcome {
            log::info!("worker {}: {} on workflow {} failed: {e}", self.cfg.id, ins.task_name, ins.workflow_id);
        }
        let reply = self.client.call(&Request::Done {
            worker: self.cfg.id,
            workflow_id: ins.workflow_id,
            step_index: ins.step_index,
            ok: outcome.is_ok(),
            error: outcome.err(),
        })?;
        match reply {
            Response::Directive { directive } => match directive {
                Directive::Retain | Directive::Release => Ok(()),
                Directive::TransferTo(to) => self.hand_off(ins.workflow_id, to),
                Directive::Return => self.hand_off(ins.workflow_id, SCHEDULER_ID),
            },
            Response::Error { message } => Err(io_err(message)),
            other => Err(io_err(format!("unexpected reply {other:?}"))),
        }
    }
}

/// Serve tasks until the scheduler says to stop. Returns the number of tasks run.
pub fn run_worker(cfg: WorkerConfig) -> io::Result<u64> {
    let mut client = Client::connect(&cfg.orchestrator)?;
    client.call(&Request::Hello { worker: cfg.id })?;
    let mut worker = Worker {
        cfg,
        client,
        held: HashMap::new(),
    };
    let mut executed = 0;
    loop {
        match worker.client.call(&Request::Poll { worker: worker.cfg.id })? {
            Response::Instruction {
                instruction: Some(ins),
            } => {
                worker.execute(ins)?;
                executed += 1;
            }
            Response::Instruction { instruction: None } => thread::sleep(worker.cfg.poll),
            Response::Shutdown => return Ok(executed),
            other => return Err(io_err(format!("unexpected reply {other:?}"))),
        }
    }
}
