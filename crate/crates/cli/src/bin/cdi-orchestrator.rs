use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use cdi_core::apps::orchestrator::{
    run_worker, tasks, Client, DataPlane, ObjectStore, Orchestrator, OrchestratorConfig, Status,
    Strategy, WorkerConfig, DEFAULT_POLL, FIRST_WORKER_ID, SCHEDULER_ID,
};
use cdi_core::cluster::{ClusterConfig, LocalCluster};
use cdi_core::{AppConfig, Session};
use cdi_cli::RoleLauncher;
use clap::{Parser, Subcommand};

/// Workflow orchestrator passing CDI objects between worker processes.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct StoreArgs {
    #[arg(long)]
    store_dir: PathBuf,
    /// Delay added to every object-store operation.
    #[arg(long, default_value_t = 5)]
    store_latency_ms: u64,
}

impl StoreArgs {
    fn open(&self) -> std::io::Result<ObjectStore> {
        ObjectStore::open(&self.store_dir, Duration::from_millis(self.store_latency_ms))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Start a local runtime, the scheduler and the worker processes.
    /// Prints the listening address once every worker has registered, then
    /// serves until stdin closes.
    Serve {
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value = "metrics")]
        strategy: Strategy,
        #[arg(long, default_value = "cdi")]
        plane: DataPlane,
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Simulated hosts; workers are spread over them round-robin.
        #[arg(long, default_value_t = 2)]
        hosts: usize,
        #[arg(long)]
        audit_log: Option<PathBuf>,
        /// Make every worker fail this task (fault injection).
        #[arg(long)]
        fail_task: Option<String>,
    },
    /// Submit workflows and print one JSON report per workflow.
    Submit {
        #[arg(long)]
        orchestrator: String,
        #[arg(long, default_value = "deblur,denoise,classify")]
        tasks: String,
        /// Object-store locator of the input.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        /// Workflows in flight at once.
        #[arg(long, default_value_t = 1)]
        concurrency: usize,
    },
    /// Copy a local file into the object store.
    Put {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        locator: String,
        #[arg(long)]
        file: PathBuf,
    },
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        id: u64,
        #[arg(long)]
        orchestrator: String,
        #[arg(long)]
        plane: DataPlane,
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        fail_task: Option<String>,
    },
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

#[allow(clippy::too_many_arguments)]
fn serve(
    workers: usize,
    strategy: Strategy,
    plane: DataPlane,
    store: StoreArgs,
    listen: String,
    hosts: usize,
    audit_log: Option<PathBuf>,
    fail_task: Option<String>,
) -> Res<()> {
    let cluster = LocalCluster::with_config(ClusterConfig {
        hosts: hosts.max(1),
        audit_log,
        ..ClusterConfig::default()
    })?;
    let session = match plane {
        DataPlane::Cdi => Some(cluster.session(SCHEDULER_ID, 0)?),
        DataPlane::Store => None,
    };
    let orch = Orchestrator::new(OrchestratorConfig {
        strategy,
        plane,
        store: Arc::new(store.open()?),
        session,
    });
    let server = orch.serve(cdi_core::net::bind(&listen)?)?;
    let addr = server.local_addr().to_string();
    let launcher = RoleLauncher::new()?;
    let mut children = Vec::new();
    for i in 0..workers {
        let id = FIRST_WORKER_ID + i as u64;
        let mut args = vec![
            "worker".to_string(),
            format!("--id={id}"),
            format!("--orchestrator={addr}"),
            format!("--plane={}", plane_name(plane)),
            format!("--store-dir={}", store.store_dir.display()),
            format!("--store-latency-ms={}", store.store_latency_ms),
        ];
        if let Some(t) = &fail_task {
            args.push(format!("--fail-task={t}"));
        }
        let cfg = cluster.app_config(id, i % cluster.hosts());
        children.push((format!("worker {id}"), launcher.spawn(&cfg, &args, Stdio::null())?));
    }
    let deadline = Instant::now() + Duration::from_secs(30);
    while orch.workers().len() < workers {
        if Instant::now() > deadline {
            return Err(format!("only {} of {workers} workers registered", orch.workers().len()).into());
        }
        thread::sleep(Duration::from_millis(5));
    }
    cdi_cli::announce(&format!("orchestrator listening on {addr}"));
    cdi_cli::wait_for_stdin_eof();
    orch.shutdown();
    cdi_cli::wait_all(children)?;
    Ok(())
}

fn plane_name(p: DataPlane) -> &'static str {
    match p {
        DataPlane::Cdi => "cdi",
        DataPlane::Store => "store",
    }
}

fn submit(orchestrator: &str, task_list: &str, input: &str, repeat: usize, concurrency: usize) -> Res<bool> {
    let names = cdi_cli::split_list(task_list);
    let started = Instant::now();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let reports = std::sync::Mutex::new(Vec::new());
    thread::scope(|s| -> Res<()> {
        let handles: Vec<_> = (0..concurrency.clamp(1, repeat.max(1)))
            .map(|_| {
                s.spawn(|| -> std::io::Result<()> {
                    let mut client = Client::connect(orchestrator)?;
                    while next.fetch_add(1, std::sync::atomic::Ordering::Relaxed) < repeat {
                        let report = client.submit(names.clone(), input)?;
                        println!("{}", serde_json::to_string(&report)?);
                        reports.lock().unwrap().push(report);
                    }
                    Ok(())
                })
            })
            .collect();
        for h in handles {
            h.join().expect("submitter panicked")?;
        }
        Ok(())
    })?;
    let reports = reports.into_inner().unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let completed = reports.iter().filter(|r| r.status == Status::Completed).count();
    eprintln!(
        "{}",
        serde_json::json!({
            "workflows": reports.len(),
            "completed": completed,
            "elapsedMs": elapsed * 1e3,
            "throughputPerSec": reports.len() as f64 / elapsed,
        })
    );
    Ok(completed == reports.len())
}

fn main() -> Res<()> {
    cdi_cli::init_logging();
    match Args::parse().cmd {
        Cmd::Serve {
            workers,
            strategy,
            plane,
            store,
            listen,
            hosts,
            audit_log,
            fail_task,
        } => serve(workers, strategy, plane, store, listen, hosts, audit_log, fail_task),
        Cmd::Submit {
            orchestrator,
            tasks: task_list,
            input,
            repeat,
            concurrency,
        } => {
            if !submit(&orchestrator, &task_list, &input, repeat, concurrency)? {
                std::process::exit(1);
            }
            Ok(())
        }
        Cmd::Put { store, locator, file } => {
            store.open()?.put(&locator, &std::fs::read(file)?)?;
            Ok(())
        }
        Cmd::Worker {
            id,
            orchestrator,
            plane,
            store,
            fail_task,
        } => {
            if let Some(t) = &fail_task {
                if !tasks::is_known(t) {
                    return Err(format!("unknown task {t:?}").into());
                }
            }
            let session = match plane {
                DataPlane::Cdi => Some(Session::register(AppConfig::from_env()?)?),
                DataPlane::Store => None,
            };
            let run = run_worker(WorkerConfig {
                id,
                orchestrator,
                plane,
                session,
                store: Some(Arc::new(store.open()?)),
                poll: DEFAULT_POLL,
                fail_task,
            });
            match run {
                Ok(executed) => log::info!("worker {id} ran {executed} tasks"),
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                    log::info!("worker {id}: orchestrator went away")
                }
                Err(e) => return Err(e.into()),
            }
            Ok(())
        }
    }
}
