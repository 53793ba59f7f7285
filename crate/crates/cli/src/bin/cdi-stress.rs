use std::io::Read;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use cdi_core::cluster::{ClusterConfig, LocalCluster};
use cdi_core::stress::{self, ClientReport, StressParams, StressSummary};
use cdi_core::{AppConfig, Session};
use cdi_cli::RoleLauncher;
use clap::{Parser, Subcommand};

/// Randomized multi-process workload that audits the ownership invariants.
/// Prints a JSON summary and exits non-zero on any violation.
#[derive(Parser)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Args {
    #[command(subcommand)]
    client: Option<Client>,
    #[command(flatten)]
    shape: Shape,
    #[arg(long, default_value_t = 2)]
    hosts: usize,
    /// Minimum number of directory snapshots to check.
    #[arg(long, default_value_t = 10_000)]
    snapshots: u64,
    #[arg(long)]
    audit_log: Option<PathBuf>,
    /// Arm a random transfer fault this often; 0 disables.
    #[arg(long, default_value_t = 50)]
    fault_every_ms: u64,
}

#[derive(clap::Args, Clone)]
struct Shape {
    #[arg(long, default_value_t = 8)]
    clients: usize,
    #[arg(long, default_value_t = 16)]
    objects: usize,
    /// Operations across all clients.
    #[arg(long, default_value_t = 5000)]
    ops: u64,
    #[arg(long, default_value_t = 64 * 1024)]
    object_size: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl Shape {
    fn params(&self) -> StressParams {
        StressParams {
            clients: self.clients,
            objects: self.objects,
            ops: self.ops,
            object_size: self.object_size,
            seed: self.seed,
        }
    }

    fn to_args(&self) -> Vec<String> {
        vec![
            format!("--clients={}", self.clients),
            format!("--objects={}", self.objects),
            format!("--ops={}", self.ops),
            format!("--object-size={}", self.object_size),
            format!("--seed={}", self.seed),
        ]
    }
}

#[derive(Subcommand)]
enum Client {
    #[command(hide = true)]
    Client {
        #[arg(long)]
        index: usize,
        #[command(flatten)]
        shape: Shape,
    },
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> Res<()> {
    cdi_cli::init_logging();
    let args = Args::parse();
    if let Some(Client::Client { index, shape }) = args.client {
        let session = Session::register(AppConfig::from_env()?)?;
        let report = stress::run_client(&session, index, &shape.params())?;
        println!("{}", serde_json::to_string(&report)?);
        return Ok(());
    }
    let p = args.shape.params();
    if p.clients < 2 || p.objects == 0 {
        return Err("need at least two clients and one object".into());
    }
    let started = Instant::now();
    let cluster = LocalCluster::with_config(ClusterConfig {
        hosts: args.hosts.max(1),
        audit_log: args.audit_log.clone(),
        ..ClusterConfig::default()
    })?;
    let launcher = RoleLauncher::new()?;
    let mut children = Vec::new();
    for i in 0..p.clients {
        let cfg = cluster.app_config(p.client_id(i).0, i % cluster.hosts());
        let mut a = vec!["client".to_string(), format!("--index={i}")];
        a.extend(args.shape.to_args());
        children.push(launcher.spawn(&cfg, &a, Stdio::piped())?);
    }
    let stop = AtomicBool::new(false);
    let summary = thread::scope(|s| -> Res<StressSummary> {
        let sampler = s.spawn(|| stress::sample_snapshots(cluster.controller(), &stop, args.snapshots));
        let injector = (args.fault_every_ms > 0).then(|| {
            let (cluster, stop, seed) = (&cluster, &stop, p.seed);
            let every = Duration::from_millis(args.fault_every_ms);
            s.spawn(move || stress::inject_faults(cluster, stop, every, seed))
        });
        let collected = (|| -> Res<_> {
            let mut clients = Vec::new();
            let mut failures = Vec::new();
            for (i, mut child) in children.into_iter().enumerate() {
                let mut out = String::new();
                child.stdout.take().expect("piped").read_to_string(&mut out)?;
                let status = child.wait()?;
                match serde_json::from_str::<ClientReport>(out.trim()) {
                    Ok(r) if status.success() => clients.push(r),
                    _ => failures.push(format!("client {i} exited with {status}")),
                }
            }
            Ok((clients, failures))
        })();
        stop.store(true, Ordering::Relaxed);
        let snapshots = sampler.join().expect("sampler panicked");
        let faults_armed = injector.map_or(0, |t| t.join().expect("injector panicked"));
        let (clients, failures) = collected?;
        if !failures.is_empty() {
            return Err(failures.join(", ").into());
        }
        Ok(StressSummary {
            clients,
            snapshots,
            faults_armed,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    })?;
    println!("{}", serde_json::to_string(&summary)?);
    eprintln!(
        "{} ops by {} clients, {} snapshots, {} faults armed, {} violations in {} ms",
        summary.ops(),
        summary.clients.len(),
        summary.snapshots.samples,
        summary.faults_armed,
        summary.violations(),
        summary.elapsed_ms
    );
    if summary.violations() > 0 {
        std::process::exit(1);
    }
    Ok(())
}
