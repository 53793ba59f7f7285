//! Helpers shared by the command-line programs.

use std::io::{self, BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdout, Command, Stdio};

use cdi_core::sdk::CONFIG_ENV;
use cdi_core::AppConfig;

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp_millis()
        .init();
}

/// Print `line` to stdout and flush, so a parent reading our output sees it
/// before we block.
pub fn announce(line: &str) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

/// Block until stdin reaches end of file.
pub fn wait_for_stdin_eof() {
    let mut sink = String::new();
    let stdin = io::stdin();
    while matches!(stdin.lock().read_line(&mut sink), Ok(n) if n > 0) {
        sink.clear();
    }
}

/// Read the first line of a child's stdout, which by convention ends with
/// the address it listens on.
pub fn read_endpoint(stdout: &mut BufReader<ChildStdout>) -> io::Result<String> {
    let mut line = String::new();
    if stdout.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "child exited before announcing"));
    }
    line.split_whitespace()
        .last()
        .map(str::to_string)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, line.clone()))
}

/// Spawns copies of the current executable as application processes, each
/// with its own config file.
pub struct RoleLauncher {
    dir: tempfile::TempDir,
    exe: PathBuf,
}

impl RoleLauncher {
    pub fn new() -> io::Result<Self> {
        Ok(RoleLauncher {
            dir: tempfile::Builder::new().prefix("cdi-roles").tempdir()?,
            exe: std::env::current_exe()?,
        })
    }

    pub fn config_path(&self, cfg: &AppConfig) -> io::Result<PathBuf> {
        let path = self.dir.path().join(format!("container-{}.conf", cfg.self_id.0));
        std::fs::write(&path, cfg.to_text())?;
        Ok(path)
    }

    /// Start `args` with `CDI_APP_CONFIG` pointing at `cfg`.
    pub fn spawn(&self, cfg: &AppConfig, args: &[String], stdout: Stdio) -> io::Result<Child> {
        Command::new(&self.exe)
            .args(args)
            .env(CONFIG_ENV, self.config_path(cfg)?)
            .stdin(Stdio::null())
            .stdout(stdout)
            .spawn()
    }
}

/// Wait for every child, failing if any exited unsuccessfully.
pub fn wait_all(children: Vec<(String, Child)>) -> io::Result<()> {
    let mut failed = Vec::new();
    for (name, mut child) in children {
        let status = child.wait()?;
        if !status.success() {
            failed.push(format!("{name} ({status})"));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(io::Error::other(format!("failed: {}", failed.join(", "))))
    }
}

/// Parse a comma-separated list.
pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::to_string).collect()
}
