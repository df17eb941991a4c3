//! Delay-constrained network utility maximization: network-calculus delay
//! bounds, a dual-descent rate solver, random exponential marking and a
//! packet-level simulator that ties them together.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod netcalc;
pub mod numopt;
pub mod rem;
pub mod scenario;
pub mod sim;
pub mod topology;

pub use netcalc::{BoundContext, BoundVariant, NetCalcError};
pub use numopt::{FluidProblem, LogUtility, PriceVector, StepSizes};
pub use rem::{EstimatorMode, MarkEstimator};
pub use scenario::{Mode, Scenario, ScenarioError};
pub use sim::{SimConfig, TraceLog};
pub use topology::{ActiveSet, CapacityFilter, EdgeId, FlowId, FlowSpec, Network, NodeId};
