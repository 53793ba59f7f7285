//! Container Data Items: fixed-size data objects shared between processes
//! under a strict single-owner protocol.
//!
//! The crate holds the whole runtime: the domain model and transfer state
//! machine, the wire format, the controller and minion services, the client
//! SDK, and the demonstration applications and benchmark harness built on it.

pub mod apps;
pub mod bench;
pub mod cluster;
pub mod controller;
pub mod minion;
pub mod model;
pub mod net;
pub mod sdk;
pub mod stress;
pub mod transfer;
pub mod wire;

pub use model::{AccessToken, CdiKey, CdiObject, ContainerId, HostId, ReturnCode};
pub use sdk::{AppConfig, CdiHandle, SdkError, Session};
