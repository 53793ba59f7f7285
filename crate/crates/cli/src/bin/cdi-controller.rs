use std::path::PathBuf;
use std::time::Duration;

use cdi_core::controller::{Controller, ControllerConfig};
use clap::Parser;

/// Run the CDI controller.
#[derive(Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "CDI_CONTROLLER_ADDR", default_value = "127.0.0.1:7000")]
    listen: String,
    /// Append one line per transfer step and lifecycle event.
    #[arg(long)]
    audit_log: Option<PathBuf>,
    #[arg(long, default_value_t = 5000)]
    phase_timeout_ms: u64,
}

fn main() -> std::io::Result<()> {
    cdi_cli::init_logging();
    let args = Args::parse();
    let server = Controller::new(ControllerConfig {
        phase_timeout: Duration::from_millis(args.phase_timeout_ms),
        audit_log: args.audit_log,
    })?
    .serve(cdi_core::net::bind(&args.listen)?)?;
    cdi_cli::announce(&format!("controller listening on {}", server.endpoint()));
    loop {
        std::thread::park();
    }
}
