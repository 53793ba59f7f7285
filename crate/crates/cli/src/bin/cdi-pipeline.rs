use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::Stdio;
use std::time::Instant;

use cdi_core::apps::pipeline::{
    format_output, run_combinator, run_detector, run_extractor, PipelineParams, Topology,
    COMBINATOR_ID, EXTRACTOR_ID,
};
use cdi_core::cluster::LocalCluster;
use cdi_core::model::ContainerId;
use cdi_core::{AppConfig, Session};
use cdi_cli::RoleLauncher;
use clap::{Parser, Subcommand, ValueEnum};

/// Frame pipeline: extractor, K detectors and a combinator, each its own process.
#[derive(Parser)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Args {
    #[command(subcommand)]
    role: Option<Role>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(clap::Args, Clone)]
struct Shape {
    #[arg(long, default_value_t = 10)]
    frames: u64,
    #[arg(long, default_value_t = 5)]
    workers: usize,
    /// Frame payload size in bytes.
    #[arg(long, default_value_t = 64 * 1024)]
    size: usize,
}

#[derive(clap::Args)]
struct RunArgs {
    #[command(flatten)]
    shape: Shape,
    #[arg(long, value_enum, default_value_t = Topo::Single)]
    topology: Topo,
    /// Write `index digest` lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use a running controller instead of starting one in-process.
    #[arg(long, requires = "minions")]
    controller: Option<String>,
    /// Minion endpoints by host, comma separated.
    #[arg(long)]
    minions: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Topo {
    Single,
    Multi,
}

#[derive(Subcommand)]
enum Role {
    /// Run one pipeline role; the container comes from CDI_APP_CONFIG.
    #[command(hide = true)]
    Role {
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        slot: usize,
        #[arg(long)]
        run: String,
        #[command(flatten)]
        shape: Shape,
    },
}

fn params(shape: &Shape, run: String) -> PipelineParams {
    PipelineParams {
        frames: shape.frames,
        workers: shape.workers,
        frame_size: shape.size,
        run,
    }
}

fn run_role(kind: &str, slot: usize, p: &PipelineParams) -> Result<(), Box<dyn std::error::Error>> {
    let session = Session::register(AppConfig::from_env()?)?;
    match kind {
        "extractor" => run_extractor(&session, p)?,
        "detector" => {
            run_detector(&session, p, slot)?;
        }
        "combinator" => {
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            let mut failed = None;
            run_combinator(&session, p, |i, d| {
                if let Err(e) = out.write_all(format_output(&[(i, d)]).as_bytes()) {
                    failed.get_or_insert(e);
                }
            })?;
            out.flush()?;
            if let Some(e) = failed {
                return Err(e.into());
            }
        }
        other => return Err(format!("unknown role {other:?}").into()),
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    cdi_cli::init_logging();
    let args = Args::parse();
    if let Some(Role::Role { kind, slot, run, shape }) = args.role {
        return run_role(&kind, slot, &params(&shape, run));
    }
    let a = args.run;
    if a.shape.workers == 0 {
        return Err("--workers must be at least 1".into());
    }
    let topology = match a.topology {
        Topo::Single => Topology::Single,
        Topo::Multi => Topology::Multi,
    };
    let (_cluster, controller, minions) = match (&a.controller, &a.minions) {
        (Some(c), Some(m)) => (None, c.clone(), cdi_cli::split_list(m)),
        _ => {
            let cluster = LocalCluster::start(topology.hosts())?;
            let c = cluster.controller_endpoint();
            let m = (0..cluster.hosts()).map(|h| cluster.minion_endpoint(h)).collect();
            (Some(cluster), c, m)
        }
    };
    if minions.len() < topology.hosts() {
        return Err(format!("topology needs {} minions", topology.hosts()).into());
    }
    let run = format!("p{}", std::process::id());
    let launcher = RoleLauncher::new()?;
    let role = |kind: &str, slot: usize| -> Vec<String> {
        let mut v = vec!["role".into(), "--kind".into(), kind.into(), "--slot".into(), slot.to_string()];
        v.extend(["--run".into(), run.clone()]);
        v.extend(["--frames".into(), a.shape.frames.to_string()]);
        v.extend(["--workers".into(), a.shape.workers.to_string()]);
        v.extend(["--size".into(), a.shape.size.to_string()]);
        v
    };
    let config = |id: ContainerId| {
        AppConfig::new(id, controller.clone(), minions[topology.host_of(id)].clone())
    };
    let p = params(&a.shape, run.clone());
    let started = Instant::now();
    let mut children = Vec::new();
    let mut combinator = launcher.spawn(&config(ContainerId(COMBINATOR_ID)), &role("combinator", 0), Stdio::piped())?;
    let comb_out = combinator.stdout.take().expect("piped");
    for slot in 0..a.shape.workers {
        let child = launcher.spawn(&config(p.detector_id(slot)), &role("detector", slot), Stdio::null())?;
        children.push((format!("detector {slot}"), child));
    }
    children.push((
        "extractor".into(),
        launcher.spawn(&config(ContainerId(EXTRACTOR_ID)), &role("extractor", 0), Stdio::null())?,
    ));
    let mut sink: Box<dyn Write> = match &a.out {
        Some(path) => Box::new(std::io::BufWriter::new(std::fs::File::create(path)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut lines = 0u64;
    for line in BufReader::new(comb_out).lines() {
        writeln!(sink, "{}", line?)?;
        lines += 1;
    }
    sink.flush()?;
    children.push(("combinator".into(), combinator));
    cdi_cli::wait_all(children)?;
    let secs = started.elapsed().as_secs_f64();
    eprintln!(
        "{lines} frames through {} detectors in {:.3}s ({:.1} frames/s)",
        a.shape.workers,
        secs,
        lines as f64 / secs
    );
    if lines != a.shape.frames {
        return Err(format!("expected {} frames, combinator emitted {lines}", a.shape.frames).into());
    }
    Ok(())
}
