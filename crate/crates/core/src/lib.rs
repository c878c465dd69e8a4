//! Dual-memory coordinator/worker agent for a simulated tabletop robot,
//! with the experiment harness used to evaluate it.

pub mod action;
pub mod agent;
pub mod config;
pub mod harness;
pub mod llm;
pub mod memory;
pub mod protocol;
pub mod report;
pub mod tasks;
pub mod world;
