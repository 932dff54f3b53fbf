//! Simulator for guest-side consolidation of hot base pages under host
//! huge-page tiering.

pub mod export;
pub mod gpac;
pub mod mem;
pub mod par;
pub mod scenario;
pub mod sim;
pub mod sweep;
pub mod telemetry;
pub mod tiering;
pub mod workload;

pub use par::Exec;
pub use scenario::{ConfigError, Scenario};
pub use sim::{run, run_with, RunReport, SimError};
