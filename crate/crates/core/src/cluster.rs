//! A controller and a set of minions running inside one process on loopback.
//! Each minion stands for one host.

use std::io;
use std::net::TcpListener;
use std::path::PathBuf;
use std::time::Duration;

use crate::controller::{Controller, ControllerConfig, ControllerServer};
use crate::minion::{default_shm_dir, Minion, MinionConfig, MinionServer, DEFAULT_BUDGET};
use crate::model::ContainerId;
use crate::sdk::{AppConfig, SdkError, Session};

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub hosts: usize,
    pub budget: u64,
    pub phase_timeout: Duration,
    pub audit_log: Option<PathBuf>,
    pub shm_dir: PathBuf,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            hosts: 1,
            budget: DEFAULT_BUDGET,
            phase_timeout: crate::controller::DEFAULT_PHASE_TIMEOUT,
            audit_log: None,
            shm_dir: default_shm_dir(),
        }
    }
}

pub struct LocalCluster {
    minions: Vec<MinionServer>,
    controller: ControllerServer,
}

impl LocalCluster {
    pub fn start(hosts: usize) -> io::Result<LocalCluster> {
        Self::with_config(ClusterConfig {
            hosts,
            ..ClusterConfig::default()
        })
    }

    pub fn with_config(cfg: ClusterConfig) -> io::Result<LocalCluster> {
        let controller = Controller::new(ControllerConfig {
            phase_timeout: cfg.phase_timeout,
            audit_log: cfg.audit_log.clone(),
        })?
        .serve(TcpListener::bind("127.0.0.1:0")?)?;
        let mut minions = Vec::with_capacity(cfg.hosts);
        for i in 0..cfg.hosts {
            let mut mc = MinionConfig::new(format!("host{i}"));
            mc.budget = cfg.budget;
            mc.shm_dir = cfg.shm_dir.clone();
            mc.io_timeout = cfg.phase_timeout;
            let server = Minion::new(mc)?.serve(TcpListener::bind("127.0.0.1:0")?)?;
            controller.controller().handle(crate::wire::Message::MinionHello {
                host_id: server.minion().host_id().to_string(),
                endpoint: server.endpoint(),
            });
            minions.push(server);
        }
        Ok(LocalCluster { minions, controller })
    }

    pub fn controller(&self) -> &Controller {
        self.controller.controller()
    }

    pub fn controller_endpoint(&self) -> String {
        self.controller.endpoint()
    }

    pub fn hosts(&self) -> usize {
        self.minions.len()
    }

    pub fn minion(&self, host: usize) -> &Minion {
        self.minions[host].minion()
    }

    pub fn minion_endpoint(&self, host: usize) -> String {
        self.minions[host].endpoint()
    }

    pub fn app_config(&self, id: u64, host: usize) -> AppConfig {
        AppConfig::new(ContainerId(id), self.controller_endpoint(), self.minion_endpoint(host))
    }

    /// Register container `id` as running on `host`.
    pub fn session(&self, id: u64, host: usize) -> Result<Session, SdkError> {
        Session::register(self.app_config(id, host))
    }
}
