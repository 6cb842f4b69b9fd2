//! Scenario generation, the episodic prediction → caching → transmission
//! loop, and capacity sweeps.

pub mod engine;
pub mod scenario;
pub mod sweep;

use thiserror::Error;

use crate::baselines::BaselineError;
use crate::config::ConfigError;
use crate::demand::DemandError;
use crate::mobility::MobilityError;
use crate::objective::ObjectiveError;
use crate::solver::SolverError;
use crate::topology::TopologyError;

pub use engine::{
    pipelined_makespan, predict_all, run_episode, run_pipeline, run_with_inputs, serial_makespan, CacheState, EpisodeInputs,
    EpisodeResult, LruHierarchy, PhaseDurations, Policy, PolicyMetrics, Predictor, RequestRecord, RunReport,
};
pub use scenario::{generate_scenario, load_scenario, read_mobility_csv, read_request_csv, Request, Scenario};
pub use sweep::{format_sig6, sweep, write_rows_csv, write_rows_csv_string, SweepAxis, SweepRow};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("topology: {0}")]
    Topology(#[from] TopologyError),
    #[error("objective: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("mobility_predict: {0}")]
    Mobility(#[from] MobilityError),
    #[error("demand_predict: {0}")]
    Demand(#[from] DemandError),
    #[error("solver: {0}")]
    Solver(#[from] SolverError),
    #[error("baselines: {0}")]
    Baseline(#[from] BaselineError),
    #[error("sim_engine: {0}")]
    Trace(String),
    #[error("sim_engine: request from unknown vehicle {0}")]
    UnknownVehicle(usize),
    #[error("sim_engine: request for unknown file {0}")]
    UnknownFile(usize),
    #[error("sim_engine: unknown policy `{0}`")]
    UnknownPolicy(String),
    #[error("sim_engine: sweep needs at least one value")]
    EmptySweep,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
