//! Per-packet check of measured delay against the packetized closed-form
//! bound, evaluated at the rates that were actually in force.
//!
//! A delivered packet is auditable when
//! - every link it crossed was in a busy period that began no earlier than
//!   `horizon` before the packet was created, and
//! - with x̄_j the largest bucket rate of flow j over
//!   [created - horizon, delivered] and the flows active in that window, the
//!   bound is defined and x̄_s does not exceed the flow's residual rate.
//!
//! Bucket contents are capped at sigma, so within that window every flow is
//! (sigma, x̄_j)-constrained and no backlog predates it.

use serde::Serialize;

use crate::netcalc::{BoundContext, BoundVariant};
use crate::topology::{ActiveSet, CapacityFilter, FlowId, FlowSpec, Network};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct AuditStats {
    pub delivered: u64,
    pub audited: u64,
    pub violations: u64,
    /// Largest measured delay over bound among audited packets.
    pub worst_ratio: f64,
}

/// Bucket-rate history of every flow; rate 0 while inactive.
#[derive(Debug, Clone, Default)]
pub(super) struct RateLog {
    /// (time, rate) per flow, non-decreasing in time.
    per_flow: Vec<Vec<(f64, f64)>>,
    /// Times of every logged change, all flows.
    change_times: Vec<f64>,
}

impl RateLog {
    pub fn new(n_flows: usize) -> Self {
        Self { per_flow: vec![vec![(f64::NEG_INFINITY, 0.0)]; n_flows], change_times: Vec::new() }
    }

    pub fn set(&mut self, flow: FlowId, time: f64, rate: f64) {
        self.per_flow[flow.0].push((time, rate));
        self.change_times.push(time);
    }

    fn max_over(&self, flow: usize, from: f64, to: f64) -> f64 {
        let log = &self.per_flow[flow];
        let first = log.partition_point(|&(t, _)| t <= from).saturating_sub(1);
        log[first..].iter().take_while(|&&(t, _)| t <= to).map(|&(_, r)| r).fold(0.0, f64::max)
    }

    fn changes_up_to(&self, t: f64) -> usize {
        self.change_times.partition_point(|&c| c <= t)
    }
}

pub(super) struct Auditor<'a> {
    net: &'a Network,
    flows: &'a [FlowSpec],
    filter: CapacityFilter,
    l_max: f64,
    horizon: f64,
    /// Last (window key, bound) per flow; equal keys see identical rates.
    cache: Vec<Option<(WindowKey, Option<f64>)>>,
    pub stats: AuditStats,
}

type WindowKey = (usize, usize);

impl<'a> Auditor<'a> {
    pub fn new(net: &'a Network, flows: &'a [FlowSpec], filter: CapacityFilter, l_max: f64, horizon: f64) -> Self {
        Self { net, flows, filter, l_max, horizon, cache: vec![None; flows.len()], stats: AuditStats::default() }
    }

    fn window_bound(&self, flow: FlowId, from: f64, to: f64, rates: &RateLog) -> Option<f64> {
        let xbar: Vec<f64> = (0..self.flows.len()).map(|j| rates.max_over(j, from, to)).collect();
        let active: ActiveSet = (0..self.flows.len()).filter(|&j| xbar[j] > 0.0).map(FlowId).collect();
        if !active.contains(flow) {
            return None;
        }
        let ctx =
            BoundContext { net: self.net, flows: self.flows, active: &active, filter: self.filter, l_max: self.l_max };
        let terms = ctx.bound_terms(flow, &xbar, BoundVariant::Packetized).ok()?;
        (terms.denominator > 0.0 && xbar[flow.0] <= terms.denominator).then(|| terms.numerator / terms.denominator)
    }

    pub fn check(&mut self, flow: FlowId, created: f64, delivered: f64, earliest_busy: f64, rates: &RateLog) {
        self.stats.delivered += 1;
        let from = created - self.horizon;
        if earliest_busy < from {
            return;
        }
        let key = (rates.changes_up_to(from), rates.changes_up_to(delivered));
        let bound = match self.cache[flow.0] {
            Some((k, b)) if k == key => b,
            _ => {
                let b = self.window_bound(flow, from, delivered, rates);
                self.cache[flow.0] = Some((key, b));
                b
            }
        };
        let Some(bound) = bound else { return };
        let delay = delivered - created;
        self.stats.audited += 1;
        self.stats.worst_ratio = self.stats.worst_ratio.max(delay / bound);
        if delay > bound * (1.0 + 1e-9) {
            self.stats.violations += 1;
            log::debug!("flow {flow}: delay {delay} s exceeds bound {bound} s (created {created})");
        }
    }
}
