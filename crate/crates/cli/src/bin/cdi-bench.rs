use std::path::PathBuf;

use cdi_core::bench::{self, parse_size, BenchConfig, BenchTopology, Mode};
use cdi_core::cluster::LocalCluster;
use clap::Parser;

/// Measure hand-off latency: CDI on one host, CDI across hosts, and a
/// framed-stream baseline.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Comma-separated modes: shm, stream, baseline-framed, or `all`.
    #[arg(long, default_value = "all")]
    mode: String,
    #[arg(long, default_value = "10k,100k,1m,10m")]
    sizes: String,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS)]
    iters: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use a running controller instead of starting one in-process.
    #[arg(long, requires = "minions")]
    controller: Option<String>,
    /// Two minion endpoints: the driver's host, then the remote host.
    #[arg(long)]
    minions: Option<String>,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    cdi_cli::init_logging();
    let args = Args::parse();
    let modes: Vec<Mode> = if args.mode == "all" {
        Mode::ALL.to_vec()
    } else {
        cdi_cli::split_list(&args.mode)
            .iter()
            .map(|m| m.parse())
            .collect::<Result<_, _>>()?
    };
    let sizes = cdi_cli::split_list(&args.sizes)
        .iter()
        .map(|s| parse_size(s))
        .collect::<Result<Vec<_>, _>>()?;
    let configs: Vec<BenchConfig> = modes
        .iter()
        .map(|&mode| BenchConfig {
            sizes: sizes.clone(),
            iterations: args.iters,
            warmup: args.warmup,
            mode,
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let (_cluster, topo) = match (&args.controller, &args.minions) {
        (Some(c), Some(m)) => {
            let m = cdi_cli::split_list(m);
            if m.len() != 2 {
                return Err("--minions needs exactly two endpoints".into());
            }
            let topo = BenchTopology {
                controller: c.clone(),
                local_minion: m[0].clone(),
                remote_minion: m[1].clone(),
            };
            (None, topo)
        }
        _ => {
            let cluster = LocalCluster::start(2)?;
            let topo = BenchTopology {
                controller: cluster.controller_endpoint(),
                local_minion: cluster.minion_endpoint(0),
                remote_minion: cluster.minion_endpoint(1),
            };
            (Some(cluster), topo)
        }
    };
    let mut results = Vec::new();
    for c in &configs {
        eprintln!("running {} over {} sizes", c.mode, c.sizes.len());
        results.extend(bench::run(c, &topo)?);
    }
    if let Some(path) = &args.out {
        std::fs::write(path, bench::to_csv(&results))?;
    }
    print!("{}", bench::report(&results));
    Ok(())
}
