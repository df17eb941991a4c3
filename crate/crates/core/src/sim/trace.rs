//! Trace records and the steady-state / transient views derived from them.

use serde::Serialize;

use crate::topology::{EdgeId, FlowId, FlowSpec};

use super::AuditStats;

/// Per active flow, per update interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub time: f64,
    pub flow: FlowId,
    /// Token-bucket refill rate after this tick's update, bits/second.
    pub rate: f64,
    /// Configured bound variant at the bucket rates; +inf when undefined.
    pub bound: f64,
    pub mean_delay: Option<f64>,
    pub max_delay: Option<f64>,
    /// Acknowledgements received in the interval.
    pub marked: u64,
    pub total: u64,
    /// Host-side estimate of p_{-s} + p^s.
    pub price_estimate: f64,
    /// Controller-side p_s after this tick.
    pub source_price: f64,
}

/// Per edge, per update interval.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EdgeRecord {
    pub time: f64,
    pub edge: EdgeId,
    pub price: f64,
    /// Transmitted bits over capacity times interval.
    pub utilization: f64,
    /// Backlog at the tick, in-service packet included.
    pub queue_bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Departure {
    pub edge: EdgeId,
    pub flow: FlowId,
    /// Time the last bit left the link.
    pub time: f64,
    pub bits: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FlowCounters {
    pub emitted: u64,
    pub delivered: u64,
    /// Queued or propagating at the end of the run.
    pub in_network: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceLog {
    pub flows: Vec<FlowRecord>,
    pub edges: Vec<EdgeRecord>,
    pub counters: Vec<FlowCounters>,
    pub audit: AuditStats,
    pub departures: Vec<Departure>,
    /// (time, flow) of joins where the proactive solver failed to converge
    /// and the reactive path was taken.
    pub proactive_fallbacks: Vec<(f64, FlowId)>,
}

/// Maximal interval with a fixed active set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Epoch {
    pub start: f64,
    pub end: f64,
    pub active: Vec<FlowId>,
}

/// Splits [0, duration) at every join and leave.
pub fn epochs(flows: &[FlowSpec], duration: f64) -> Vec<Epoch> {
    let mut cuts = vec![0.0, duration];
    for f in flows {
        cuts.extend([f.join_time, f.leave_time].into_iter().filter(|&t| t > 0.0 && t < duration));
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .map(|w| Epoch {
            start: w[0],
            end: w[1],
            active: flows.iter().filter(|f| f.join_time <= w[0] && w[0] < f.leave_time).map(|f| f.id).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub start_s: f64,
    pub end_s: f64,
    pub active_flows: Vec<usize>,
    /// Mean bucket rate per active flow over the final fraction of the epoch.
    pub mean_rate_bps: Vec<f64>,
    /// Mean bound per active flow over the same window; null when any sample was undefined.
    pub mean_bound_s: Vec<Option<f64>>,
    pub mean_utilization: Vec<f64>,
}

/// Steady-state averages over the last `tail_fraction` of every epoch.
pub fn epoch_summaries(
    trace: &TraceLog,
    flows: &[FlowSpec],
    n_edges: usize,
    duration: f64,
    tail_fraction: f64,
) -> Vec<EpochSummary> {
    epochs(flows, duration)
        .into_iter()
        .map(|ep| {
            let from = ep.end - tail_fraction * (ep.end - ep.start);
            let in_tail = |t: f64| t > from && t <= ep.end;
            let mut mean_rate_bps = Vec::new();
            let mut mean_bound_s = Vec::new();
            for &s in &ep.active {
                let recs: Vec<&FlowRecord> = trace.flows.iter().filter(|r| r.flow == s && in_tail(r.time)).collect();
                let n = recs.len().max(1) as f64;
                mean_rate_bps.push(recs.iter().map(|r| r.rate).sum::<f64>() / n);
                let b = recs.iter().map(|r| r.bound).sum::<f64>() / n;
                mean_bound_s.push(b.is_finite().then_some(b));
            }
            let mean_utilization = (0..n_edges)
                .map(|e| {
                    let recs: Vec<f64> = trace
                        .edges
                        .iter()
                        .filter(|r| r.edge.0 == e && in_tail(r.time))
                        .map(|r| r.utilization)
                        .collect();
                    recs.iter().sum::<f64>() / recs.len().max(1) as f64
                })
                .collect();
            EpochSummary {
                start_s: ep.start,
                end_s: ep.end,
                active_flows: ep.active.iter().map(|f| f.0).collect(),
                mean_rate_bps,
                mean_bound_s,
                mean_utilization,
            }
        })
        .collect()
}

/// Consecutive compliant intervals that count as settled.
pub const SETTLE_TICKS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinTransient {
    pub flow: usize,
    pub join_s: f64,
    /// Ticks in (join_s, window_end_s) are examined.
    pub window_end_s: f64,
    /// Largest finite excess of any active bound over its target before
    /// settling, seconds. Excursions after settling are estimator noise
    /// around an active constraint, not part of the transient.
    pub overshoot_s: f64,
    /// Ticks before settling where some active bound was undefined.
    pub unbounded_ticks: usize,
    /// Time from the join to the first of `SETTLE_TICKS` consecutive ticks
    /// with every bound within target; null if that never happens.
    pub settling_s: Option<f64>,
}

impl JoinTransient {
    pub fn overshoots(&self) -> bool {
        self.overshoot_s > 0.0 || self.unbounded_ticks > 0
    }
}

/// One report per join, each examined up to the next join or leave.
pub fn join_transients(trace: &TraceLog, flows: &[FlowSpec], duration: f64) -> Vec<JoinTransient> {
    let mut changes: Vec<f64> = flows.iter().flat_map(|f| [f.join_time, f.leave_time]).chain([duration]).collect();
    changes.sort_by(f64::total_cmp);
    let mut joins: Vec<&FlowSpec> = flows.iter().filter(|f| f.join_time < duration).collect();
    joins.sort_by(|a, b| a.join_time.total_cmp(&b.join_time).then(a.id.cmp(&b.id)));
    joins
        .into_iter()
        .map(|f| {
            let join = f.join_time;
            let end = changes.iter().copied().find(|&t| t > join).unwrap_or(duration);
            // (time, compliant, unbounded, worst finite excess) per tick
            let mut ticks: Vec<(f64, bool, bool, f64)> = Vec::new();
            for r in trace.flows.iter().filter(|r| r.time > join && r.time < end) {
                let d = flows[r.flow.0].delay_target;
                let unbounded = !r.bound.is_finite();
                let excess = if unbounded { 0.0 } else { (r.bound - d).max(0.0) };
                let ok = !unbounded && r.bound <= d;
                match ticks.last_mut() {
                    Some(t) if t.0 == r.time => {
                        t.1 &= ok;
                        t.2 |= unbounded;
                        t.3 = t.3.max(excess);
                    }
                    _ => ticks.push((r.time, ok, unbounded, excess)),
                }
            }
            let settled_at = ticks.windows(SETTLE_TICKS).position(|w| w.iter().all(|t| t.1));
            let transient = &ticks[..settled_at.unwrap_or(ticks.len())];
            JoinTransient {
                flow: f.id.0,
                join_s: join,
                window_end_s: end,
                overshoot_s: transient.iter().map(|t| t.3).fold(0.0, f64::max),
                unbounded_ticks: transient.iter().filter(|t| t.2).count(),
                settling_s: settled_at.map(|i| ticks[i].0 - join),
            }
        })
        .collect()
}
