//! Experiment harness: scenarios, the churn simulation, availability
//! metrics and report files.

pub mod generate;
pub mod metrics;
pub mod report;
pub mod scenario;
pub mod world;

use thiserror::Error;

pub use metrics::{impact_ratio, success_ratio, Action, Grouping, SessionLogEntry, SessionStatus, TargetMeta};
pub use report::{summarize, write_report, Summary};
pub use scenario::{Diagnostic, Scenario};
pub use world::{run, RunResult};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("setup failed: {0}")]
    Setup(#[from] crate::peer::PeerError),
    #[error("guard statistics: {0}")]
    Guard(#[from] crate::chord::guard::GuardError),
    #[error("io failure: {0}")]
    Io(#[from] std::io::Error),
}
