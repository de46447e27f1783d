//! Discrete-time simulation of the ground mesh and the ISS link.

mod engine;
mod metrics;
mod scenario;
mod schedule;

use thiserror::Error;

use crate::bsp::BspError;
use crate::bundle::BundleError;
use crate::fragment::FragmentError;
use crate::orbital::OrbitalError;
use crate::routing::RoutingError;

pub use engine::{
    ActiveTransmission, BundleRecord, Delivered, Engine, EngineConfig, Journal, Receipt, StationState, Submission,
    Telemetry, TraceEvent, TransmissionLog,
};
pub(crate) use engine::priority_name;
pub use metrics::{latency_stats, BundleTrace, Counters, LatencyStats, MetricsRecord};
pub use scenario::{
    expand_injections, profile_names, profile_source, Injection, KeySpec, ScenarioSpec, Sweep, Traffic, DEFAULT_SECRET,
};
pub use schedule::{ContactSchedule, ScheduleSpec, Stagger};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("bundle {0} not found")]
    NotFound(String),
    #[error(transparent)]
    Orbital(#[from] OrbitalError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Security(#[from] BspError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
}

/// Builds the engine for `spec`, runs it until every bundle is settled or the
/// duration elapses, and returns the engine for inspection.
pub fn run_scenario(spec: &ScenarioSpec) -> Result<Engine, SimError> {
    let mut engine = Engine::from_spec(spec)?;
    engine.run_to_completion()?;
    Ok(engine)
}
