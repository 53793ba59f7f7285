use std::path::PathBuf;
use std::time::Duration;

use cdi_core::bench::parse_size;
use cdi_core::minion::{default_shm_dir, Minion, MinionConfig};
use clap::Parser;

/// Run a CDI minion: the per-host shared-memory agent.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long)]
    host_id: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Controller to announce this minion to.
    #[arg(long)]
    controller: Option<String>,
    /// Shared-memory budget, e.g. `512m`.
    #[arg(long, default_value = "1g")]
    budget: String,
    #[arg(long)]
    shm_dir: Option<PathBuf>,
    /// Endpoint peers should use when it differs from the bound address.
    #[arg(long)]
    advertise: Option<String>,
    #[arg(long, default_value_t = 5000)]
    io_timeout_ms: u64,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    cdi_cli::init_logging();
    let args = Args::parse();
    let mut cfg = MinionConfig::new(args.host_id);
    cfg.budget = parse_size(&args.budget)? as u64;
    cfg.shm_dir = args.shm_dir.unwrap_or_else(default_shm_dir);
    cfg.advertise = args.advertise;
    cfg.io_timeout = Duration::from_millis(args.io_timeout_ms);
    let server = Minion::new(cfg)?.serve(cdi_core::net::bind(&args.listen)?)?;
    if let Some(controller) = &args.controller {
        server.minion().announce(controller)?;
    }
    cdi_cli::announce(&format!("minion {} listening on {}", server.minion().host_id(), server.endpoint()));
    loop {
        std::thread::park();
    }
}
