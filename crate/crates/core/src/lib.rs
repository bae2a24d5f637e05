//! Discrete-event simulator for peer-to-peer time-shifted streaming.

pub mod engine;
pub mod metrics;
pub mod stream;
pub mod workload;
pub mod turntable;
pub mod interval;
pub mod config;
pub mod scenario;
pub mod cli;
