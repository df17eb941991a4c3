//! Fixtures shared by the benchmarks.

use std::path::PathBuf;

use slicecc_core::netcalc::{PiecewiseLinearCurve, Segment};
use slicecc_core::{
    ActiveSet, BoundVariant, CapacityFilter, FlowId, FlowSpec, FluidProblem, Network, Scenario, SimConfig,
};

/// Convex curve with `n` pieces of unit length and slopes 1..=n.
pub fn staircase(n: usize, origin: f64) -> PiecewiseLinearCurve {
    let mut value = origin;
    let segments = (0..n)
        .map(|k| {
            let s = Segment { start: k as f64, value, slope: (k + 1) as f64 };
            value += s.slope;
            s
        })
        .collect();
    PiecewiseLinearCurve::new(segments).unwrap()
}

/// 100 Mbps bottleneck then a 128 Mbps link: flows 0 and 1 cross both, flow 2
/// only the second. All three active, 1 ms targets.
pub fn three_host(variant: BoundVariant) -> FluidProblem {
    let mut net = Network::new();
    let a = net.add_node("a");
    let b = net.add_node("b");
    let c = net.add_node("c");
    let first = net.add_edge("ab", a, b, 100e6, 0.0);
    let second = net.add_edge("bc", b, c, 128e6, 0.0);
    let flows: Vec<FlowSpec> = [(a, vec![first, second]), (a, vec![first, second]), (b, vec![second])]
        .into_iter()
        .enumerate()
        .map(|(id, (source, path))| FlowSpec {
            id: FlowId(id),
            source,
            destination: c,
            path,
            sigma: 12144.0,
            rate_min: 1e6,
            rate_max: 100e6,
            delay_target: 1e-3,
            utility_weight: 1e5,
            join_time: 0.0,
            leave_time: 1.0,
        })
        .collect();
    let active = ActiveSet::all(&flows);
    FluidProblem { net, flows, active, filter: CapacityFilter::include_all(), l_max: 12144.0, variant }
}

/// A shipped scenario cut to `duration` simulated seconds.
pub fn shipped(name: &str, duration: f64) -> SimConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    let mut sc = Scenario::load(path).unwrap();
    sc.schedule.duration_s = duration;
    for life in sc.schedule.flows.values_mut() {
        life.leave_s = life.leave_s.min(duration);
    }
    SimConfig::from_scenario(&sc)
}
