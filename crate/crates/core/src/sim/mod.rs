//! Packet-level discrete-event simulation of greedy token-bucket hosts,
//! store-and-forward FIFO links with per-flow ECN marking, and a controller
//! that updates prices every interval.

mod audit;
mod engine;
pub mod trace;

use crate::netcalc::BoundVariant;
use crate::numopt::StepSizes;
use crate::rem::EstimatorMode;
use crate::scenario::{Mode, Scenario};
use crate::topology::{CapacityFilter, FlowSpec, Network};

pub use audit::AuditStats;
pub use trace::{Departure, EdgeRecord, FlowCounters, FlowRecord, TraceLog};

/// Everything a run needs, in SI units.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub net: Network,
    pub flows: Vec<FlowSpec>,
    pub filter: CapacityFilter,
    pub variant: BoundVariant,
    /// bits
    pub l_max: f64,
    /// bits; every data packet has this size
    pub packet_size: f64,
    /// seconds between price updates
    pub update_interval: f64,
    pub estimator_mode: EstimatorMode,
    pub window_ticks: usize,
    pub mode: Mode,
    pub mark_scale: f64,
    pub steps: StepSizes,
    /// Seconds between a tick's computation and switches applying its marks.
    pub control_delay: f64,
    pub audit_horizon: f64,
    pub duration: f64,
    pub seed: u64,
    pub solver_max_iters: usize,
    pub solver_rate_tol: f64,
    /// Keep every link departure in the trace (memory heavy).
    pub record_departures: bool,
}

impl SimConfig {
    pub fn from_scenario(sc: &Scenario) -> Self {
        let p = &sc.params;
        Self {
            net: sc.network(),
            flows: sc.flows(),
            filter: sc.filter(),
            variant: p.bound_variant,
            l_max: sc.l_max_bits(),
            packet_size: sc.packet_bits(),
            update_interval: sc.update_interval(),
            estimator_mode: p.estimator_mode,
            window_ticks: p.estimator_window_ticks,
            mode: p.mode,
            mark_scale: p.mark_scale,
            steps: sc.step_sizes(),
            control_delay: p.control_delay_ms * 1e-3,
            audit_horizon: p.audit_horizon_ms * 1e-3,
            duration: sc.schedule.duration_s,
            seed: p.seed,
            solver_max_iters: p.solver_max_iters,
            solver_rate_tol: p.solver_rate_tol_bps,
            record_departures: false,
        }
    }
}

/// Runs the event loop to `cfg.duration`. Identical configs give identical traces.
pub fn run(cfg: &SimConfig) -> TraceLog {
    engine::Engine::new(cfg).run()
}
