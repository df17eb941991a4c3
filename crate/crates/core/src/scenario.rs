//! TOML scenario files. The deserialized file is the canonical `Scenario`:
//! omitted keys take their defaults on load and every key is written on
//! emit, so load, emit, load is the identity. Values are stored in the file's
//! units (Mbps, ms, bytes) and converted to SI on demand.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netcalc::BoundVariant;
use crate::numopt::StepSizes;
use crate::rem::EstimatorMode;
use crate::topology::{validate, CapacityFilter, FlowId, FlowSpec, Network};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// Reactive hosts learn prices from marks only; proactive runs the fluid
/// solver at each join and installs its result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Reactive,
    Proactive,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Reactive => "reactive",
            Mode::Proactive => "proactive",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reactive" => Ok(Mode::Reactive),
            "proactive" => Ok(Mode::Proactive),
            other => Err(format!("unknown mode {other:?} (expected reactive or proactive)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeFile {
    pub name: String,
    pub from: String,
    pub to: String,
    pub capacity_mbps: f64,
    #[serde(default)]
    pub propagation_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default, rename = "edge")]
    pub edges: Vec<EdgeFile>,
}

fn default_rate_min() -> f64 {
    1.0
}
fn default_rate_max() -> f64 {
    100.0
}
fn default_delay_target() -> f64 {
    1.0
}
fn default_bytes() -> u32 {
    1518
}
fn default_weight() -> f64 {
    1e5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowFile {
    pub source: String,
    pub destination: String,
    /// Edge names in forwarding order.
    pub path: Vec<String>,
    #[serde(default = "default_rate_min")]
    pub rate_min_mbps: f64,
    #[serde(default = "default_rate_max")]
    pub rate_max_mbps: f64,
    #[serde(default = "default_delay_target")]
    pub delay_target_ms: f64,
    #[serde(default = "default_bytes")]
    pub sigma_bytes: u32,
    #[serde(default = "default_weight")]
    pub utility_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lifetime {
    pub join_s: f64,
    pub leave_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub duration_s: f64,
    /// Keyed by flow id; flows without an entry live for the whole run.
    #[serde(default, rename = "flow")]
    pub flows: BTreeMap<String, Lifetime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Edge price step, per bit/second of excess load.
    pub gamma_e: f64,
    /// Source price step, per bit/second of bound slack.
    pub gamma_j: f64,
    pub update_interval_ms: f64,
    pub bound_variant: BoundVariant,
    pub estimator_mode: EstimatorMode,
    /// Update intervals pooled by the windowed estimator.
    pub estimator_window_ticks: usize,
    pub mode: Mode,
    pub l_max_bytes: u32,
    pub packet_size_bytes: u32,
    /// Switches mark with mark_scale * price; hosts divide their estimate
    /// by it. Keeps mark fractions away from 0 when prices are small.
    pub mark_scale: f64,
    /// Drop path links with capacity >= ratio * path minimum from C_s.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negligible_ratio: Option<f64>,
    /// Latency of switch-to-controller reports and price pushes.
    pub control_delay_ms: f64,
    /// How far back conformance is checked when auditing measured delays.
    pub audit_horizon_ms: f64,
    pub solver_max_iters: usize,
    pub solver_rate_tol_bps: f64,
    pub seed: u64,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            gamma_e: 5e-13,
            gamma_j: 1e-13,
            update_interval_ms: 5.0,
            bound_variant: BoundVariant::Packetized,
            estimator_mode: EstimatorMode::Windowed,
            estimator_window_ticks: 20,
            mode: Mode::Reactive,
            l_max_bytes: 1518,
            packet_size_bytes: 1518,
            mark_scale: 800.0,
            negligible_ratio: None,
            control_delay_ms: 0.0,
            audit_horizon_ms: 50.0,
            solver_max_iters: 2_000_000,
            solver_rate_tol_bps: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub network: NetworkFile,
    /// Keyed by flow id "0", "1", ...
    #[serde(default, rename = "flow")]
    pub flows: BTreeMap<String, FlowFile>,
    #[serde(default)]
    pub params: Params,
    pub schedule: ScheduleFile,
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let mut sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.fill_schedule();
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario fields are always representable in TOML")
    }

    fn fill_schedule(&mut self) {
        let duration = self.schedule.duration_s;
        for id in self.flows.keys() {
            self.schedule.flows.entry(id.clone()).or_insert(Lifetime { join_s: 0.0, leave_s: duration });
        }
    }

    /// Flow entries ordered by numeric id.
    fn ordered_flows(&self) -> Result<Vec<(usize, &FlowFile)>, Vec<String>> {
        let mut out = Vec::with_capacity(self.flows.len());
        let mut errs = Vec::new();
        for (k, f) in &self.flows {
            match k.parse::<usize>() {
                Ok(id) => out.push((id, f)),
                Err(_) => errs.push(format!("flow key {k:?} is not a non-negative integer")),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        for (pos, (id, _)) in out.iter().enumerate() {
            if *id != pos {
                errs.push(format!("flow ids must be 0..{} without gaps (found {id})", out.len()));
                break;
            }
        }
        if errs.is_empty() {
            Ok(out)
        } else {
            Err(errs)
        }
    }

    pub fn network(&self) -> Network {
        let mut net = Network::new();
        for e in &self.network.edges {
            let from = net.add_node(&e.from);
            let to = net.add_node(&e.to);
            net.add_edge(&e.name, from, to, e.capacity_mbps * 1e6, e.propagation_ms * 1e-3);
        }
        net
    }

    /// Builds flow specs against `net`; fails on unknown node or edge names.
    fn build_flows(&self, net: &Network) -> Result<Vec<FlowSpec>, Vec<String>> {
        let mut errs = Vec::new();
        let mut flows = Vec::new();
        for (id, f) in self.ordered_flows()? {
            let node = |name: &str, errs: &mut Vec<String>| {
                net.node_by_name(name).unwrap_or_else(|| {
                    errs.push(format!("flow {id}: unknown node {name:?}"));
                    crate::topology::NodeId(usize::MAX)
                })
            };
            let source = node(&f.source, &mut errs);
            let destination = node(&f.destination, &mut errs);
            let path = f
                .path
                .iter()
                .filter_map(|name| {
                    let e = net.edge_by_name(name);
                    if e.is_none() {
                        errs.push(format!("flow {id}: unknown edge {name:?}"));
                    }
                    e
                })
                .collect();
            let life = self
                .schedule
                .flows
                .get(&id.to_string())
                .copied()
                .unwrap_or(Lifetime { join_s: 0.0, leave_s: self.schedule.duration_s });
            flows.push(FlowSpec {
                id: FlowId(id),
                source,
                destination,
                path,
                sigma: f64::from(f.sigma_bytes) * 8.0,
                rate_min: f.rate_min_mbps * 1e6,
                rate_max: f.rate_max_mbps * 1e6,
                delay_target: f.delay_target_ms * 1e-3,
                utility_weight: f.utility_weight,
                join_time: life.join_s,
                leave_time: life.leave_s,
            });
        }
        if errs.is_empty() {
            Ok(flows)
        } else {
            Err(errs)
        }
    }

    pub fn flows(&self) -> Vec<FlowSpec> {
        self.build_flows(&self.network()).expect("scenario was validated on load")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errs = Vec::new();
        let p = &self.params;
        let positive = [
            ("gamma_e", p.gamma_e),
            ("gamma_j", p.gamma_j),
            ("update_interval_ms", p.update_interval_ms),
            ("mark_scale", p.mark_scale),
            ("audit_horizon_ms", p.audit_horizon_ms),
            ("solver_rate_tol_bps", p.solver_rate_tol_bps),
            ("schedule.duration_s", self.schedule.duration_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite (got {v})"));
            }
        }
        if !(p.control_delay_ms >= 0.0 && p.control_delay_ms.is_finite()) {
            errs.push(format!("control_delay_ms must be non-negative (got {})", p.control_delay_ms));
        }
        if p.estimator_window_ticks == 0 {
            errs.push("estimator_window_ticks must be at least 1".into());
        }
        if p.solver_max_iters == 0 {
            errs.push("solver_max_iters must be at least 1".into());
        }
        if p.packet_size_bytes == 0 || p.packet_size_bytes > p.l_max_bytes {
            errs.push(format!(
                "packet_size_bytes must be in 1..=l_max_bytes ({}), got {}",
                p.l_max_bytes, p.packet_size_bytes
            ));
        }
        if let Some(r) = p.negligible_ratio {
            if !(r > 1.0 && r.is_finite()) {
                errs.push(format!("negligible_ratio must exceed 1 (got {r})"));
            }
        }
        for (k, f) in &self.flows {
            if f.sigma_bytes < p.packet_size_bytes {
                errs.push(format!(
                    "flow {k}: sigma_bytes {} is smaller than one packet ({} bytes)",
                    f.sigma_bytes, p.packet_size_bytes
                ));
            }
        }
        for k in self.schedule.flows.keys() {
            if !self.flows.contains_key(k) {
                errs.push(format!("schedule entry for undeclared flow {k:?}"));
            }
        }
        let net = self.network();
        match self.build_flows(&net) {
            Ok(flows) => {
                if let Err(v) = validate(&net, &flows) {
                    errs.extend(v.iter().map(|e| e.to_string()));
                }
            }
            Err(v) => errs.extend(v),
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errs))
        }
    }

    pub fn filter(&self) -> CapacityFilter {
        CapacityFilter { negligible_ratio: self.params.negligible_ratio }
    }

    pub fn l_max_bits(&self) -> f64 {
        f64::from(self.params.l_max_bytes) * 8.0
    }

    pub fn packet_bits(&self) -> f64 {
        f64::from(self.params.packet_size_bytes) * 8.0
    }

    pub fn update_interval(&self) -> f64 {
        self.params.update_interval_ms * 1e-3
    }

    pub fn step_sizes(&self) -> StepSizes {
        StepSizes::uniform(self.network.edges.len(), self.flows.len(), self.params.gamma_e, self.params.gamma_j)
    }
}
