//! Deterministic event-driven simulator for data-center server and network
//! power management.

pub mod config;
pub mod engine;
pub mod network;
pub mod powerpolicy;
pub mod runner;
pub mod scheduling;
pub mod server;
pub mod sim;
pub mod stats;
pub mod workload;
