use std::path::Path;

use thiserror::Error;

use crate::model::ContainerId;

pub const CONFIG_ENV: &str = "CDI_APP_CONFIG";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected name=value")]
    Syntax { line: usize },
    #[error("line {line}: unknown setting {name:?}")]
    Unknown { line: usize, name: String },
    #[error("bad self_id {0:?}")]
    BadId(String),
    #[error("bad endpoint {0:?}")]
    BadEndpoint(String),
    #[error("missing setting {0}")]
    Missing(&'static str),
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("{CONFIG_ENV} is not set")]
    NoEnv,
}

/// Identity of an application process and where its controller and local minion live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppConfig {
    pub self_id: ContainerId,
    pub controller: String,
    pub minion: String,
}

fn check_endpoint(s: &str) -> Result<String, ConfigError> {
    match s.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(s.to_string()),
        _ => Err(ConfigError::BadEndpoint(s.to_string())),
    }
}

impl AppConfig {
    pub fn new(
        self_id: ContainerId,
        controller: impl Into<String>,
        minion: impl Into<String>,
    ) -> Self {
        AppConfig {
            self_id,
            controller: controller.into(),
            minion: minion.into(),
        }
    }

    /// Parse `self_id=`, `controller=` and `minion=` lines. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let (mut id, mut controller, mut minion) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let value = value.trim();
            match name.trim() {
                "self_id" => {
                    id = Some(ContainerId(
                        value.parse().map_err(|_| ConfigError::BadId(value.into()))?,
                    ))
                }
                "controller" => controller = Some(check_endpoint(value)?),
                "minion" => minion = Some(check_endpoint(value)?),
                other => {
                    return Err(ConfigError::Unknown {
                        line: i + 1,
                        name: other.into(),
                    })
                }
            }
        }
        Ok(AppConfig {
            self_id: id.ok_or(ConfigError::Missing("self_id"))?,
            controller: controller.ok_or(ConfigError::Missing("controller"))?,
            minion: minion.ok_or(ConfigError::Missing("minion"))?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        let path = std::env::var_os(CONFIG_ENV).ok_or(ConfigError::NoEnv)?;
        Self::from_file(Path::new(&path))
    }

    pub fn to_text(&self) -> String {
        format!(
            "self_id={}\ncontroller={}\nminion={}\n",
            self.self_id.0, self.controller, self.minion
        )
    }
}
