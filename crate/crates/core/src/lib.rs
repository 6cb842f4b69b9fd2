//! Proactive cooperative content caching for three-tier vehicular networks.
//!
//! The crate models a cloud / macro-base-station (MBS) / roadside-unit (RSU)
//! hierarchy, predicts where vehicles will be and what they will request, and
//! places content with a relaxed 0-1 penalty gradient method. The numeric
//! core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix it
//! to `f64`, which is what the simulator and the CLI use.

pub mod baselines;
pub mod config;
pub mod delay;
pub mod demand;
pub mod mobility;
pub mod objective;
pub mod scalar;
pub mod sim;
pub mod solver;
pub mod topology;

pub use config::{parse_config, ScenarioConfig};
pub use delay::{Placement, SourceTier};
pub use scalar::Scalar;
pub use solver::{SolverConfig, SolverMode};

pub type Topology = topology::Topology<f64>;
pub type Catalog = topology::Catalog<f64>;
pub type Capacities = topology::Capacities<f64>;
pub type Network = topology::Network<f64>;
pub type ProblemInstance = objective::ProblemInstance<f64>;
pub type RelaxedPlacement = objective::RelaxedPlacement<f64>;
pub type ResidenceMatrix = objective::ResidenceMatrix<f64>;
pub type DemandMatrix = objective::DemandMatrix<f64>;
pub type SolveReport = solver::SolveReport<f64>;
