//! Demonstration applications built on the SDK.

pub mod orchestrator;
pub mod pipeline;
