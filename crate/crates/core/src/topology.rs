//! Static network graph, flow descriptions and the index sets derived from
//! them: the sources crossing an edge, the edges used by a source, and the
//! capacity set a source's delay bound is computed over.

use std::collections::BTreeSet;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EdgeId(pub usize);

/// Flows are numbered densely from zero in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct FlowId(pub usize);

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for FlowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: EdgeId,
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    /// bits/second
    pub capacity: f64,
    /// seconds
    pub propagation_delay: f64,
    pub packetized: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: impl Into<String>) -> NodeId {
        let name = name.into();
        if let Some(id) = self.node_by_name(&name) {
            return id;
        }
        self.nodes.push(name);
        NodeId(self.nodes.len() - 1)
    }

    pub fn add_edge(
        &mut self,
        name: impl Into<String>,
        from: NodeId,
        to: NodeId,
        capacity: f64,
        propagation_delay: f64,
    ) -> EdgeId {
        let id = EdgeId(self.edges.len());
        self.edges.push(Edge { id, name: name.into(), from, to, capacity, propagation_delay, packetized: true });
        id
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n == name).map(NodeId)
    }

    pub fn edge_by_name(&self, name: &str) -> Option<EdgeId> {
        self.edges.iter().position(|e| e.name == name).map(EdgeId)
    }

    pub fn edge(&self, id: EdgeId) -> Result<&Edge, TopologyError> {
        self.edges.get(id.0).ok_or(TopologyError::UnknownEdge(id))
    }

    pub fn capacity(&self, id: EdgeId) -> f64 {
        self.edges[id.0].capacity
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub id: FlowId,
    pub source: NodeId,
    pub destination: NodeId,
    pub path: Vec<EdgeId>,
    /// Token bucket depth, bits.
    pub sigma: f64,
    /// m_s, bits/second
    pub rate_min: f64,
    /// M_s, bits/second
    pub rate_max: f64,
    /// d_s, seconds
    pub delay_target: f64,
    pub utility_weight: f64,
    pub join_time: f64,
    pub leave_time: f64,
}

impl FlowSpec {
    pub fn uses(&self, edge: EdgeId) -> bool {
        self.path.contains(&edge)
    }

    pub fn clamp_rate(&self, rate: f64) -> f64 {
        rate.clamp(self.rate_min, self.rate_max)
    }
}

/// Flows active at some instant.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ActiveSet(BTreeSet<FlowId>);

impl ActiveSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn all(flows: &[FlowSpec]) -> Self {
        flows.iter().map(|f| f.id).collect()
    }

    pub fn insert(&mut self, id: FlowId) -> bool {
        self.0.insert(id)
    }

    pub fn remove(&mut self, id: FlowId) -> bool {
        self.0.remove(&id)
    }

    pub fn contains(&self, id: FlowId) -> bool {
        self.0.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<FlowId> for ActiveSet {
    fn from_iter<I: IntoIterator<Item = FlowId>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

/// Which path links count towards C_s.
///
/// With a ratio set, a link is kept only when its capacity is strictly below
/// `ratio` times the smallest capacity on the path; faster links are treated
/// as having negligible effect on the bound. `None` keeps every path link.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CapacityFilter {
    pub negligible_ratio: Option<f64>,
}

impl CapacityFilter {
    pub fn include_all() -> Self {
        Self { negligible_ratio: None }
    }

    pub fn with_ratio(ratio: f64) -> Self {
        Self { negligible_ratio: Some(ratio) }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("unknown edge {0}")]
    UnknownEdge(EdgeId),
    #[error("flow {0}: every path link was filtered out of C_s")]
    EmptyCapacitySet(FlowId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("edge {edge}: capacity must be positive (got {capacity})")]
    NonPositiveCapacity { edge: String, capacity: f64 },
    #[error("edge {edge}: propagation delay must be non-negative")]
    NegativePropagation { edge: String },
    #[error("edge {edge}: endpoint does not exist")]
    DanglingEdge { edge: String },
    #[error("edge name {0} is used more than once")]
    DuplicateEdge(String),
    #[error("flow ids must be numbered 0..n without gaps (found {found} at position {position})")]
    FlowNumbering { position: usize, found: usize },
    #[error("flow {0}: rate interval empty (need 0 < m_s <= M_s)")]
    EmptyRateInterval(FlowId),
    #[error("flow {0}: delay target must be positive")]
    NonPositiveDelayTarget(FlowId),
    #[error("flow {0}: utility weight must be positive")]
    NonPositiveWeight(FlowId),
    #[error("flow {0}: sigma must be non-negative")]
    NegativeSigma(FlowId),
    #[error("flow {0}: path is empty")]
    EmptyPath(FlowId),
    #[error("flow {flow}: path references unknown edge {edge}")]
    PathUnknownEdge { flow: FlowId, edge: EdgeId },
    #[error("flow {0}: path is not a connected walk from source to destination")]
    DisconnectedPath(FlowId),
    #[error("flow {0}: join time must precede leave time")]
    BadLifetime(FlowId),
    #[error("edge {edge}: minimum rates sum to {demand} bps, above capacity {capacity} bps")]
    MinimumRatesInfeasible { edge: String, demand: f64, capacity: f64 },
}

/// S(e): the active flows whose path contains `edge`.
pub fn sources_on_edge(
    net: &Network,
    flows: &[FlowSpec],
    active: &ActiveSet,
    edge: EdgeId,
) -> Result<ActiveSet, TopologyError> {
    net.edge(edge)?;
    Ok(flows.iter().filter(|f| active.contains(f.id) && f.uses(edge)).map(|f| f.id).collect())
}

/// E(s), in path order.
pub fn edges_of_source(flow: &FlowSpec) -> &[EdgeId] {
    &flow.path
}

/// Returns (c_s^m, C_s) for the flow after applying the filter.
pub fn min_capacity(net: &Network, flow: &FlowSpec, filter: CapacityFilter) -> Result<(f64, Vec<f64>), TopologyError> {
    let caps = flow.path.iter().map(|&e| net.edge(e).map(|e| e.capacity)).collect::<Result<Vec<_>, _>>()?;
    let path_min = caps.iter().copied().fold(f64::INFINITY, f64::min);
    let kept: Vec<f64> = match filter.negligible_ratio {
        None => caps,
        Some(ratio) => caps.into_iter().filter(|&c| c < ratio * path_min).collect(),
    };
    if kept.is_empty() {
        return Err(TopologyError::EmptyCapacitySet(flow.id));
    }
    let cm = kept.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((cm, kept))
}

/// Checks structural invariants and minimum-rate feasibility, reporting every
/// violation found.
pub fn validate(net: &Network, flows: &[FlowSpec]) -> Result<(), Vec<ValidationError>> {
    let mut errs = Vec::new();

    for (i, e) in net.edges.iter().enumerate() {
        if !(e.capacity > 0.0) || !e.capacity.is_finite() {
            errs.push(ValidationError::NonPositiveCapacity { edge: e.name.clone(), capacity: e.capacity });
        }
        if !(e.propagation_delay >= 0.0) {
            errs.push(ValidationError::NegativePropagation { edge: e.name.clone() });
        }
        if e.from.0 >= net.nodes.len() || e.to.0 >= net.nodes.len() {
            errs.push(ValidationError::DanglingEdge { edge: e.name.clone() });
        }
        if net.edges[..i].iter().any(|o| o.name == e.name) {
            errs.push(ValidationError::DuplicateEdge(e.name.clone()));
        }
    }

    for (pos, f) in flows.iter().enumerate() {
        if f.id.0 != pos {
            errs.push(ValidationError::FlowNumbering { position: pos, found: f.id.0 });
        }
        if !(f.rate_min > 0.0 && f.rate_min <= f.rate_max) {
            errs.push(ValidationError::EmptyRateInterval(f.id));
        }
        if !(f.delay_target > 0.0) {
            errs.push(ValidationError::NonPositiveDelayTarget(f.id));
        }
        if !(f.utility_weight > 0.0) {
            errs.push(ValidationError::NonPositiveWeight(f.id));
        }
        if !(f.sigma >= 0.0) {
            errs.push(ValidationError::NegativeSigma(f.id));
        }
        if !(f.join_time < f.leave_time) {
            errs.push(ValidationError::BadLifetime(f.id));
        }
        if f.path.is_empty() {
            errs.push(ValidationError::EmptyPath(f.id));
            continue;
        }
        let mut at = f.source;
        let mut walk_ok = true;
        for &eid in &f.path {
            match net.edges.get(eid.0) {
                None => {
                    errs.push(ValidationError::PathUnknownEdge { flow: f.id, edge: eid });
                    walk_ok = false;
                    break;
                }
                Some(e) => {
                    if e.from != at {
                        walk_ok = false;
                    }
                    at = e.to;
                }
            }
        }
        if walk_ok && at != f.destination {
            walk_ok = false;
        }
        if !walk_ok && !errs.iter().any(|e| matches!(e, ValidationError::PathUnknownEdge { flow, .. } if *flow == f.id))
        {
            errs.push(ValidationError::DisconnectedPath(f.id));
        }
    }

    for e in &net.edges {
        let demand: f64 = flows.iter().filter(|f| f.uses(e.id)).map(|f| f.rate_min).sum();
        if demand > e.capacity {
            errs.push(ValidationError::MinimumRatesInfeasible { edge: e.name.clone(), demand, capacity: e.capacity });
        }
    }

    if errs.is_empty() {
        Ok(())
    } else {
        Err(errs)
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::three_host;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sources_on_edges_of_three_host_topology() {
        let (net, flows) = three_host();
        let all = ActiveSet::all(&flows);
        let on_bottleneck = sources_on_edge(&net, &flows, &all, EdgeId(0)).unwrap();
        assert_eq!(on_bottleneck, [FlowId(0), FlowId(1)].into_iter().collect());
        let on_shared = sources_on_edge(&net, &flows, &all, EdgeId(1)).unwrap();
        assert_eq!(on_shared, ActiveSet::all(&flows));
    }

    #[test]
    fn unused_edge_has_no_sources() {
        let (mut net, flows) = three_host();
        let a = net.node_by_name("sa").unwrap();
        let spare = net.add_edge("spare", a, a, 1e9, 0.0);
        let all = ActiveSet::all(&flows);
        assert!(sources_on_edge(&net, &flows, &all, spare).unwrap().is_empty());
        assert_eq!(sources_on_edge(&net, &flows, &all, EdgeId(9)), Err(TopologyError::UnknownEdge(EdgeId(9))));
    }

    #[test]
    fn edges_of_source_preserve_order() {
        let (_, flows) = three_host();
        assert_eq!(edges_of_source(&flows[0]), &[EdgeId(0), EdgeId(1)]);
        assert_eq!(edges_of_source(&flows[2]), &[EdgeId(1)]);
    }

    #[test]
    fn min_capacity_default_and_filtered() {
        let (net, flows) = three_host();
        let (cm, cs) = min_capacity(&net, &flows[0], CapacityFilter::include_all()).unwrap();
        assert_eq!(cm, 100e6);
        assert_eq!(cs, vec![100e6, 128e6]);
        let (cm, cs) = min_capacity(&net, &flows[2], CapacityFilter::include_all()).unwrap();
        assert_eq!(cm, 128e6);
        assert_eq!(cs, vec![128e6]);

        let (cm, cs) = min_capacity(&net, &flows[0], CapacityFilter::with_ratio(1.25)).unwrap();
        assert_eq!((cm, cs), (100e6, vec![100e6]));
        assert_eq!(
            min_capacity(&net, &flows[0], CapacityFilter::with_ratio(1.0)),
            Err(TopologyError::EmptyCapacitySet(FlowId(0)))
        );
    }

    #[test]
    fn validate_accepts_three_host() {
        let (net, flows) = three_host();
        assert_eq!(validate(&net, &flows), Ok(()));
    }

    #[test]
    fn validate_reports_every_violation() {
        let (net, mut flows) = three_host();
        flows[0].rate_min = 200e6;
        flows[1].delay_target = 0.0;
        let errs = validate(&net, &flows).unwrap_err();
        assert!(errs.contains(&ValidationError::EmptyRateInterval(FlowId(0))));
        assert!(errs.contains(&ValidationError::NonPositiveDelayTarget(FlowId(1))));
        assert!(errs.iter().any(|e| matches!(e, ValidationError::MinimumRatesInfeasible { .. })));
    }

    #[test]
    fn validate_rejects_oversubscribed_minimum_rates() {
        let (net, mut flows) = three_host();
        flows.truncate(2);
        for f in &mut flows {
            f.rate_min = 60e6;
        }
        let errs = validate(&net, &flows).unwrap_err();
        assert_eq!(errs.len(), 1, "{errs:?}");
        assert!(matches!(
            &errs[0],
            ValidationError::MinimumRatesInfeasible { edge, .. } if edge == "bottleneck"
        ));
    }

    #[test]
    fn validate_rejects_broken_walks() {
        let (net, mut flows) = three_host();
        flows[2].path = vec![EdgeId(0)];
        flows[1].path.clear();
        flows[0].path = vec![EdgeId(7)];
        let errs = validate(&net, &flows).unwrap_err();
        assert!(errs.contains(&ValidationError::DisconnectedPath(FlowId(2))));
        assert!(errs.contains(&ValidationError::EmptyPath(FlowId(1))));
        assert!(errs.contains(&ValidationError::PathUnknownEdge { flow: FlowId(0), edge: EdgeId(7) }));
    }

    proptest! {
        #[test]
        fn index_sets_are_dual(mask in 0u8..8, drop in 0usize..3) {
            let (net, flows) = three_host();
            let active: ActiveSet = flows.iter().filter(|f| mask & (1 << f.id.0) != 0).map(|f| f.id).collect();
            for e in &net.edges {
                let s_e = sources_on_edge(&net, &flows, &active, e.id).unwrap();
                for f in &flows {
                    let on = active.contains(f.id) && edges_of_source(f).contains(&e.id);
                    prop_assert_eq!(s_e.contains(f.id), on);
                }
            }
            // removing a flow never grows any S(e)
            let mut smaller = active.clone();
            smaller.remove(FlowId(drop));
            for e in &net.edges {
                let before = sources_on_edge(&net, &flows, &active, e.id).unwrap();
                let after = sources_on_edge(&net, &flows, &smaller, e.id).unwrap();
                prop_assert!(after.iter().all(|f| before.contains(f)));
            }
        }

        #[test]
        fn min_capacity_is_min_of_filtered_path(c0 in 1e6f64..1e9, c1 in 1e6f64..1e9, ratio in 1.01f64..20.0) {
            let mut net = Network::new();
            let a = net.add_node("a");
            let b = net.add_node("b");
            let c = net.add_node("c");
            let e0 = net.add_edge("x", a, b, c0, 0.0);
            let e1 = net.add_edge("y", b, c, c1, 0.0);
            let mut flow = three_host().1.remove(0);
            flow.source = a;
            flow.destination = c;
            flow.path = vec![e0, e1];
            let (cm, cs) = min_capacity(&net, &flow, CapacityFilter::with_ratio(ratio)).unwrap();
            prop_assert_eq!(cm, c0.min(c1));
            prop_assert_eq!(cm, cs.iter().copied().fold(f64::INFINITY, f64::min));
        }
    }
}
