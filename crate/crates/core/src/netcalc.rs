//! Deterministic network calculus: arrival and service curves, min-plus
//! convolution of convex piecewise-linear curves, blind multiplexing and the
//! closed-form per-source delay bounds used as NUM constraints.
//!
//! Units: bits, bits/second and seconds throughout.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{
    min_capacity, sources_on_edge, ActiveSet, CapacityFilter, EdgeId, FlowId, FlowSpec, Network, TopologyError,
};

const CONTINUITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetCalcError {
    #[error("invalid curve: {0}")]
    InvalidCurve(&'static str),
    #[error("convexity required: min-plus convolution is only implemented for convex piecewise-linear curves")]
    ConvexityRequired,
    #[error("empty input list")]
    Empty,
    #[error("unstable link{}: capacity {capacity} bps does not exceed cross rate {cross_rate} bps", edge.map(|e| format!(" {e}")).unwrap_or_default())]
    UnstableLink { edge: Option<EdgeId>, capacity: f64, cross_rate: f64 },
    #[error("unbounded delay: service rate {service_rate} bps below arrival rate {arrival_rate} bps")]
    UnboundedDelay { arrival_rate: f64, service_rate: f64 },
    #[error("bound undefined for flow {flow}: residual capacity {residual} bps on edge {edge}")]
    BoundUndefined { flow: FlowId, edge: EdgeId, residual: f64 },
    #[error("flow {0} is not active")]
    InactiveFlow(FlowId),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub value: f64,
    pub slope: f64,
}

/// A wide-sense increasing curve on t >= 0 made of linear pieces; the last
/// piece extends to infinity. Jumps are allowed at breakpoints but must be
/// upward.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearCurve {
    segments: Vec<Segment>,
}

impl PiecewiseLinearCurve {
    pub fn new(segments: Vec<Segment>) -> Result<Self, NetCalcError> {
        let first = segments.first().ok_or(NetCalcError::InvalidCurve("no segments"))?;
        if first.start != 0.0 {
            return Err(NetCalcError::InvalidCurve("first segment must start at t = 0"));
        }
        for s in &segments {
            if !(s.slope >= 0.0 && s.slope.is_finite()) {
                return Err(NetCalcError::InvalidCurve("slopes must be finite and non-negative"));
            }
            if !(s.value >= 0.0 && s.value.is_finite()) {
                return Err(NetCalcError::InvalidCurve("values must be finite and non-negative"));
            }
        }
        for w in segments.windows(2) {
            if !(w[1].start > w[0].start) || !w[1].start.is_finite() {
                return Err(NetCalcError::InvalidCurve("segment starts must strictly increase"));
            }
            let end = w[0].value + w[0].slope * (w[1].start - w[0].start);
            if w[1].value < end - CONTINUITY_TOL * end.abs().max(1.0) {
                return Err(NetCalcError::InvalidCurve("downward jump"));
            }
        }
        Ok(Self { segments })
    }

    /// f(t) = rate * t
    pub fn linear(rate: f64) -> Result<Self, NetCalcError> {
        Self::new(vec![Segment { start: 0.0, value: 0.0, slope: rate }])
    }

    pub fn zero() -> Self {
        Self { segments: vec![Segment { start: 0.0, value: 0.0, slope: 0.0 }] }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn origin(&self) -> f64 {
        self.segments[0].value
    }

    pub fn tail_slope(&self) -> f64 {
        self.segments.last().map(|s| s.slope).unwrap_or(0.0)
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let idx = self.segments.partition_point(|s| s.start <= t) - 1;
        let s = &self.segments[idx];
        s.value + s.slope * (t - s.start)
    }

    /// Continuous on (0, inf) with non-decreasing slopes.
    pub fn is_convex(&self) -> bool {
        self.segments.windows(2).all(|w| {
            let end = w[0].value + w[0].slope * (w[1].start - w[0].start);
            (w[1].value - end).abs() <= CONTINUITY_TOL * end.abs().max(1.0) && w[1].slope >= w[0].slope
        })
    }

    /// Finite pieces as (length, slope).
    fn pieces(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.segments.windows(2).map(|w| (w[1].start - w[0].start, w[0].slope))
    }
}

/// (f ⊗ g)(t) = inf_{0<=s<=t} f(s) + g(t-s), for convex f and g: the pieces of
/// both curves laid end to end by increasing slope, starting at f(0) + g(0).
pub fn min_plus_convolve(
    f: &PiecewiseLinearCurve,
    g: &PiecewiseLinearCurve,
) -> Result<PiecewiseLinearCurve, NetCalcError> {
    if !f.is_convex() || !g.is_convex() {
        return Err(NetCalcError::ConvexityRequired);
    }
    let tail = f.tail_slope().min(g.tail_slope());
    let mut pieces: Vec<(f64, f64)> = f.pieces().chain(g.pieces()).filter(|&(_, slope)| slope < tail).collect();
    pieces.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut segments = Vec::with_capacity(pieces.len() + 1);
    let mut start = 0.0;
    let mut value = f.origin() + g.origin();
    for (len, slope) in pieces {
        match segments.last_mut() {
            Some(Segment { slope: s, .. }) if *s == slope => {}
            _ => segments.push(Segment { start, value, slope }),
        }
        start += len;
        value += len * slope;
    }
    match segments.last() {
        Some(s) if s.slope == tail => {}
        _ => segments.push(Segment { start, value, slope: tail }),
    }
    PiecewiseLinearCurve::new(segments)
}

/// (sigma, rate)-upper constrained arrival curve: sigma + rate * t for t >= 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenBucketCurve {
    pub sigma: f64,
    pub rate: f64,
}

impl TokenBucketCurve {
    pub fn new(sigma: f64, rate: f64) -> Result<Self, NetCalcError> {
        if !(sigma >= 0.0 && rate >= 0.0) {
            return Err(NetCalcError::InvalidCurve("token bucket needs sigma >= 0 and rate >= 0"));
        }
        Ok(Self { sigma, rate })
    }

    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            0.0
        } else {
            self.sigma + self.rate * t
        }
    }

    pub fn to_curve(&self) -> PiecewiseLinearCurve {
        PiecewiseLinearCurve { segments: vec![Segment { start: 0.0, value: self.sigma, slope: self.rate }] }
    }
}

/// beta_{R,T}(t) = R [t - T]^+
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLatencyCurve {
    pub rate: f64,
    pub latency: f64,
}

impl RateLatencyCurve {
    pub fn new(rate: f64, latency: f64) -> Result<Self, NetCalcError> {
        if !(rate > 0.0 && latency >= 0.0) {
            return Err(NetCalcError::InvalidCurve("rate-latency curve needs R > 0 and T >= 0"));
        }
        Ok(Self { rate, latency })
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.rate * (t - self.latency).max(0.0)
    }

    pub fn to_curve(&self) -> PiecewiseLinearCurve {
        let segments = if self.latency > 0.0 {
            vec![
                Segment { start: 0.0, value: 0.0, slope: 0.0 },
                Segment { start: self.latency, value: 0.0, slope: self.rate },
            ]
        } else {
            vec![Segment { start: 0.0, value: 0.0, slope: self.rate }]
        };
        PiecewiseLinearCurve { segments }
    }

    /// Recognizes curves of the form R [t - T]^+.
    pub fn from_curve(curve: &PiecewiseLinearCurve) -> Option<Self> {
        match curve.segments() {
            [s] if s.value == 0.0 && s.slope > 0.0 => Some(Self { rate: s.slope, latency: 0.0 }),
            [a, b] if a.value == 0.0 && a.slope == 0.0 && b.value == 0.0 && b.slope > 0.0 => {
                Some(Self { rate: b.slope, latency: b.start })
            }
            _ => None,
        }
    }
}

/// Tandem of rate-latency servers: (min R_k, sum T_k).
pub fn concat_rate_latency(servers: &[RateLatencyCurve]) -> Result<RateLatencyCurve, NetCalcError> {
    let first = servers.first().ok_or(NetCalcError::Empty)?;
    Ok(servers[1..]
        .iter()
        .fold(*first, |acc, s| RateLatencyCurve { rate: acc.rate.min(s.rate), latency: acc.latency + s.latency }))
}

/// Sum of token-bucket arrival curves.
pub fn aggregate_arrivals(flows: &[TokenBucketCurve]) -> Result<TokenBucketCurve, NetCalcError> {
    if flows.is_empty() {
        return Err(NetCalcError::Empty);
    }
    Ok(flows.iter().fold(TokenBucketCurve { sigma: 0.0, rate: 0.0 }, |acc, f| TokenBucketCurve {
        sigma: acc.sigma + f.sigma,
        rate: acc.rate + f.rate,
    }))
}

/// Leftover service of a constant-rate link after a (sigma, x) cross flow:
/// (c - x)[t - (sigma + extra)/(c - x)]^+. Pass l_max as `extra_latency_bits`
/// for a packetized link, 0 for fluid.
pub fn blind_multiplex(
    capacity: f64,
    cross: TokenBucketCurve,
    extra_latency_bits: f64,
) -> Result<RateLatencyCurve, NetCalcError> {
    let residual = capacity - cross.rate;
    if !(residual > 0.0) {
        return Err(NetCalcError::UnstableLink { edge: None, capacity, cross_rate: cross.rate });
    }
    Ok(RateLatencyCurve { rate: residual, latency: (cross.sigma + extra_latency_bits) / residual })
}

/// Largest horizontal distance between a token-bucket arrival curve and a
/// rate-latency service curve: T + sigma/R.
pub fn horizontal_deviation(alpha: TokenBucketCurve, beta: RateLatencyCurve) -> Result<f64, NetCalcError> {
    if beta.rate < alpha.rate {
        return Err(NetCalcError::UnboundedDelay { arrival_rate: alpha.rate, service_rate: beta.rate });
    }
    Ok(beta.latency + alpha.sigma / beta.rate)
}

/// Closed-form delay bound variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundVariant {
    /// All links see all flows: (|C_s|(n-1)+1) sigma / (c_s^m - x_{-s}).
    Overestimate,
    /// Exact contention per link: max |S(k)| and the most congested residual.
    Tight,
    /// `Tight` plus one l_max per counted link.
    #[default]
    Packetized,
    /// sigma / (c_s^m - x_{-s}) alone.
    SingleTerm,
}

impl BoundVariant {
    pub const ALL: [BoundVariant; 4] =
        [BoundVariant::Overestimate, BoundVariant::Tight, BoundVariant::Packetized, BoundVariant::SingleTerm];

    pub fn as_str(&self) -> &'static str {
        match self {
            BoundVariant::Overestimate => "overestimate",
            BoundVariant::Tight => "tight",
            BoundVariant::Packetized => "packetized",
            BoundVariant::SingleTerm => "single_term",
        }
    }

    /// Variants whose constraint is linear in the other sources' rates.
    pub fn is_linear(&self) -> bool {
        matches!(self, BoundVariant::Overestimate | BoundVariant::SingleTerm)
    }
}

impl fmt::Display for BoundVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BoundVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overestimate" => Ok(BoundVariant::Overestimate),
            "tight" => Ok(BoundVariant::Tight),
            "packetized" => Ok(BoundVariant::Packetized),
            "single_term" | "single-term" => Ok(BoundVariant::SingleTerm),
            other => Err(format!(
                "unknown bound variant {other:?} (expected overestimate, tight, packetized or single_term)"
            )),
        }
    }
}

/// Numerator (bits) and denominator (bits/second) of a closed-form bound.
/// The denominator may be non-positive; `delay_bound` rejects that case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    pub numerator: f64,
    pub denominator: f64,
    /// Edge realizing the denominator.
    pub limiting_edge: EdgeId,
}

impl BoundTerms {
    /// denominator - numerator / d: the quantity the source-price update
    /// descends along. Non-negative iff the bound meets `d`.
    pub fn slack(&self, delay_target: f64) -> f64 {
        self.denominator - self.numerator / delay_target
    }
}

/// Everything the bound formulas read: the graph, the declared flows, which of
/// them are active, the C_s filter and the maximum packet size.
///
/// `rates` slices passed to the methods are indexed by `FlowId`; entries of
/// inactive flows are ignored.
#[derive(Debug, Clone, Copy)]
pub struct BoundContext<'a> {
    pub net: &'a Network,
    pub flows: &'a [FlowSpec],
    pub active: &'a ActiveSet,
    pub filter: CapacityFilter,
    /// bits
    pub l_max: f64,
}

impl<'a> BoundContext<'a> {
    fn flow(&self, id: FlowId) -> Result<&'a FlowSpec, NetCalcError> {
        if !self.active.contains(id) {
            return Err(NetCalcError::InactiveFlow(id));
        }
        Ok(&self.flows[id.0])
    }

    /// x_{-s}: summed rate of every other active source.
    pub fn others_rate(&self, id: FlowId, rates: &[f64]) -> f64 {
        self.active.iter().filter(|&j| j != id).map(|j| rates[j.0]).sum()
    }

    /// Index of the path edge with the least capacity among C_s.
    fn min_capacity_edge(&self, flow: &FlowSpec, cm: f64) -> EdgeId {
        flow.path.iter().copied().find(|&e| self.net.capacity(e) == cm).unwrap_or(flow.path[0])
    }

    pub fn bound_terms(&self, id: FlowId, rates: &[f64], variant: BoundVariant) -> Result<BoundTerms, NetCalcError> {
        let flow = self.flow(id)?;
        let (cm, cs) = min_capacity(self.net, flow, self.filter)?;
        let n_cs = cs.len() as f64;
        let sigma = flow.sigma;
        match variant {
            BoundVariant::Overestimate | BoundVariant::SingleTerm => {
                let n = self.active.len() as f64;
                let numerator =
                    if variant == BoundVariant::SingleTerm { sigma } else { (n_cs * (n - 1.0) + 1.0) * sigma };
                Ok(BoundTerms {
                    numerator,
                    denominator: cm - self.others_rate(id, rates),
                    limiting_edge: self.min_capacity_edge(flow, cm),
                })
            }
            BoundVariant::Tight | BoundVariant::Packetized => {
                let mut max_sharing = 0usize;
                let mut denominator = f64::INFINITY;
                let mut limiting_edge = flow.path[0];
                for &e in &flow.path {
                    let on_edge = sources_on_edge(self.net, self.flows, self.active, e)?;
                    max_sharing = max_sharing.max(on_edge.len());
                    let cross: f64 = on_edge.iter().filter(|&j| j != id).map(|j| rates[j.0]).sum();
                    let residual = self.net.capacity(e) - cross;
                    if residual < denominator {
                        denominator = residual;
                        limiting_edge = e;
                    }
                }
                let mut numerator = (n_cs * (max_sharing as f64 - 1.0) + 1.0) * sigma;
                if variant == BoundVariant::Packetized {
                    numerator += n_cs * self.l_max;
                }
                Ok(BoundTerms { numerator, denominator, limiting_edge })
            }
        }
    }

    /// Worst-case delay of the selected variant, seconds.
    pub fn delay_bound(&self, id: FlowId, rates: &[f64], variant: BoundVariant) -> Result<f64, NetCalcError> {
        let terms = self.bound_terms(id, rates, variant)?;
        if !(terms.denominator > 0.0) {
            return Err(NetCalcError::BoundUndefined {
                flow: id,
                edge: terms.limiting_edge,
                residual: terms.denominator,
            });
        }
        Ok(terms.numerator / terms.denominator)
    }

    /// End-to-end service curve seen by the flow when every other active
    /// source is assumed to cross every counted link.
    ///
    /// Fluid: blind multiplexing per link against ((n-1) sigma, x_{-s}) and
    /// concatenation. Packetized: each link additionally carries l_max and,
    /// as in the packetized closed form, every link is taken at c_s^m.
    pub fn effective_service_curve(
        &self,
        id: FlowId,
        rates: &[f64],
        packetized: bool,
    ) -> Result<RateLatencyCurve, NetCalcError> {
        let flow = self.flow(id)?;
        let (cm, cs) = min_capacity(self.net, flow, self.filter)?;
        let n = self.active.len() as f64;
        let cross = TokenBucketCurve { sigma: (n - 1.0) * flow.sigma, rate: self.others_rate(id, rates) };
        let extra = if packetized { self.l_max } else { 0.0 };
        let kept: Vec<EdgeId> = flow.path.iter().copied().filter(|&e| cs.contains(&self.net.capacity(e))).collect();
        let per_link = kept
            .iter()
            .map(|&e| {
                let c = if packetized { cm } else { self.net.capacity(e) };
                blind_multiplex(c, cross, extra).map_err(|err| match err {
                    NetCalcError::UnstableLink { capacity, cross_rate, .. } => {
                        NetCalcError::UnstableLink { edge: Some(e), capacity, cross_rate }
                    }
                    other => other,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        concat_rate_latency(&per_link)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::fixtures::three_host;
    use crate::topology::{FlowSpec, NodeId};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
    }

    // Independent oracle: inf over a uniform grid of split points.
    fn grid_inf(f: &PiecewiseLinearCurve, g: &PiecewiseLinearCurve, t: f64, step: f64) -> f64 {
        let n = (t / step).round() as usize;
        (0..=n)
            .map(|i| {
                let s = (i as f64 * step).min(t);
                f.eval(s) + g.eval(t - s)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn convolving_equal_lines_is_identity() {
        let c = 1e6;
        let f = PiecewiseLinearCurve::linear(c).unwrap();
        let h = min_plus_convolve(&f, &f).unwrap();
        assert_eq!(h, f);
    }

    #[test]
    fn rate_latency_convolution_matches_closed_form() {
        let b1 = RateLatencyCurve::new(50e6, 1e-4).unwrap();
        let b2 = RateLatencyCurve::new(100e6, 2e-4).unwrap();
        let h = min_plus_convolve(&b1.to_curve(), &b2.to_curve()).unwrap();
        let rl = RateLatencyCurve::from_curve(&h).unwrap();
        assert_eq!(rl.rate, 50e6);
        assert!(close(rl.latency, 3e-4, 1e-12));
        // direct evaluation of min{R1,R2}[t - (T1+T2)]^+
        for i in 0..100 {
            let t = i as f64 * 1e-5;
            let direct = 50e6 * (t - 3e-4f64).max(0.0);
            assert!((h.eval(t) - direct).abs() <= 1e-6, "t={t}");
        }
    }

    #[test]
    fn convolving_with_zero_curve_flattens_to_origin() {
        // inf_s f(s) + 0 = f(0) for a non-decreasing f
        let f = RateLatencyCurve::new(10e6, 1e-3).unwrap().to_curve();
        let h = min_plus_convolve(&f, &PiecewiseLinearCurve::zero()).unwrap();
        assert_eq!(h, PiecewiseLinearCurve::zero());
        let tb = TokenBucketCurve::new(500.0, 1e6).unwrap().to_curve();
        let h = min_plus_convolve(&tb, &PiecewiseLinearCurve::zero()).unwrap();
        assert_eq!(h.eval(0.0), 500.0);
        assert_eq!(h.eval(7.0), 500.0);
    }

    #[test]
    fn non_convex_input_rejected() {
        let concave = PiecewiseLinearCurve::new(vec![
            Segment { start: 0.0, value: 0.0, slope: 2.0 },
            Segment { start: 1.0, value: 2.0, slope: 1.0 },
        ])
        .unwrap();
        let line = PiecewiseLinearCurve::linear(1.0).unwrap();
        assert_eq!(min_plus_convolve(&concave, &line), Err(NetCalcError::ConvexityRequired));
        let jump = PiecewiseLinearCurve::new(vec![
            Segment { start: 0.0, value: 0.0, slope: 1.0 },
            Segment { start: 1.0, value: 5.0, slope: 1.0 },
        ])
        .unwrap();
        assert_eq!(min_plus_convolve(&line, &jump), Err(NetCalcError::ConvexityRequired));
    }

    #[test]
    fn curve_invariants_enforced() {
        assert!(PiecewiseLinearCurve::new(vec![]).is_err());
        assert!(PiecewiseLinearCurve::new(vec![Segment { start: 1.0, value: 0.0, slope: 1.0 }]).is_err());
        assert!(PiecewiseLinearCurve::new(vec![Segment { start: 0.0, value: 0.0, slope: -1.0 }]).is_err());
        assert!(PiecewiseLinearCurve::new(vec![
            Segment { start: 0.0, value: 3.0, slope: 0.0 },
            Segment { start: 1.0, value: 1.0, slope: 0.0 },
        ])
        .is_err());
    }

    #[test]
    fn concat_examples() {
        let b = RateLatencyCurve::new(100e6, 0.0).unwrap();
        assert_eq!(concat_rate_latency(&[b]).unwrap(), b);

        let pair = [RateLatencyCurve::new(50e6, 1e-4).unwrap(), RateLatencyCurve::new(100e6, 2e-4).unwrap()];
        let c = concat_rate_latency(&pair).unwrap();
        assert_eq!(c.rate, 50e6);
        assert!(close(c.latency, 3e-4, 1e-12));

        let r = RateLatencyCurve::new(20e6, 1e-4).unwrap();
        let c = concat_rate_latency(&[r, r, r]).unwrap();
        assert_eq!(c.rate, 20e6);
        assert!(close(c.latency, 3e-4, 1e-12));

        assert_eq!(concat_rate_latency(&[]), Err(NetCalcError::Empty));
    }

    #[test]
    fn concat_agrees_with_brute_force_grid() {
        let pair = [RateLatencyCurve::new(50e6, 1e-4).unwrap(), RateLatencyCurve::new(100e6, 2e-4).unwrap()];
        let c = concat_rate_latency(&pair).unwrap();
        let step = 1e-6;
        for i in 0..60 {
            let t = i as f64 * 1e-5;
            let brute = grid_inf(&pair[0].to_curve(), &pair[1].to_curve(), t, step);
            let exact = c.eval(t);
            assert!(brute >= exact - 1e-6 && brute - exact <= 100e6 * step + 1e-6, "t={t}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let one = TokenBucketCurve::new(12144.0, 50e6).unwrap();
        assert_eq!(aggregate_arrivals(&[one]).unwrap(), one);
        let two = aggregate_arrivals(&[one, TokenBucketCurve::new(12144.0, 30e6).unwrap()]).unwrap();
        assert_eq!(two, TokenBucketCurve { sigma: 24288.0, rate: 80e6 });
        let others: Vec<_> = [10e6, 20e6, 30e6].iter().map(|&x| TokenBucketCurve::new(12144.0, x).unwrap()).collect();
        let agg = aggregate_arrivals(&others).unwrap();
        assert_eq!(agg, TokenBucketCurve { sigma: 3.0 * 12144.0, rate: 60e6 });
        assert_eq!(aggregate_arrivals(&[]), Err(NetCalcError::Empty));
    }

    #[test]
    fn blind_multiplex_examples() {
        let cross = TokenBucketCurve::new(12144.0, 50e6).unwrap();
        let b = blind_multiplex(100e6, cross, 0.0).unwrap();
        assert_eq!(b.rate, 50e6);
        assert!(close(b.latency, 2.4288e-4, 1e-12));
        // β₁ = [ct − σ₂ − x₂t]^+ evaluated directly
        for i in 0..50 {
            let t = i as f64 * 1e-5;
            let direct = (100e6 * t - 12144.0 - 50e6 * t).max(0.0);
            assert!((b.eval(t) - direct).abs() < 1e-6);
        }

        let b = blind_multiplex(100e6, TokenBucketCurve::new(0.0, 0.0).unwrap(), 0.0).unwrap();
        assert_eq!(b, RateLatencyCurve { rate: 100e6, latency: 0.0 });

        let b = blind_multiplex(100e6, cross, 12144.0).unwrap();
        assert_eq!(b.rate, 50e6);
        assert!(close(b.latency, 4.8576e-4, 1e-12));

        let err = blind_multiplex(50e6, cross, 0.0).unwrap_err();
        assert!(matches!(err, NetCalcError::UnstableLink { .. }));
    }

    #[test]
    fn horizontal_deviation_examples() {
        let d = horizontal_deviation(
            TokenBucketCurve::new(12096.0, 10e6).unwrap(),
            RateLatencyCurve::new(20e6, 0.0).unwrap(),
        )
        .unwrap();
        assert!(close(d, 6.048e-4, 1e-12));

        let d =
            horizontal_deviation(TokenBucketCurve::new(0.0, 5e6).unwrap(), RateLatencyCurve::new(20e6, 3e-4).unwrap())
                .unwrap();
        assert_eq!(d, 3e-4);

        let d = horizontal_deviation(
            TokenBucketCurve::new(12144.0, 10e6).unwrap(),
            RateLatencyCurve::new(20e6, 1e-3).unwrap(),
        )
        .unwrap();
        assert!(close(d, 1.6072e-3, 1e-12));

        assert!(matches!(
            horizontal_deviation(TokenBucketCurve::new(1.0, 30e6).unwrap(), RateLatencyCurve::new(20e6, 0.0).unwrap()),
            Err(NetCalcError::UnboundedDelay { .. })
        ));
    }

    fn single_link(capacity: f64, sigma: f64) -> (Network, Vec<FlowSpec>) {
        let mut net = Network::new();
        let a = net.add_node("a");
        let b = net.add_node("b");
        let e = net.add_edge("link", a, b, capacity, 0.0);
        let mk = |id| FlowSpec {
            id: FlowId(id),
            source: a,
            destination: b,
            path: vec![e],
            sigma,
            rate_min: 1e6,
            rate_max: 100e6,
            delay_target: 1e-3,
            utility_weight: 1e5,
            join_time: 0.0,
            leave_time: 1.0,
        };
        (net, vec![mk(0), mk(1)])
    }

    #[test]
    fn effective_service_curve_examples() {
        let (net, flows) = three_host();
        let alone: ActiveSet = [FlowId(0)].into_iter().collect();
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &alone,
            filter: CapacityFilter::include_all(),
            l_max: 12144.0,
        };
        let b = ctx.effective_service_curve(FlowId(0), &[50e6, 0.0, 0.0], false).unwrap();
        assert_eq!(b, RateLatencyCurve { rate: 100e6, latency: 0.0 });

        let (net, flows) = single_link(40e6, 12096.0);
        let both = ActiveSet::all(&flows);
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &both,
            filter: CapacityFilter::include_all(),
            l_max: 12096.0,
        };
        let rates = [20e6, 20e6];
        let b = ctx.effective_service_curve(FlowId(0), &rates, false).unwrap();
        assert_eq!(b.rate, 20e6);
        assert!(close(b.latency, 6.048e-4, 1e-12));
        let b = ctx.effective_service_curve(FlowId(0), &rates, true).unwrap();
        assert_eq!(b.rate, 20e6);
        assert!(close(b.latency, 1.2096e-3, 1e-12));

        let err = ctx.effective_service_curve(FlowId(0), &[0.0, 40e6], false).unwrap_err();
        assert!(matches!(err, NetCalcError::UnstableLink { edge: Some(EdgeId(0)), .. }));
    }

    #[test]
    fn delay_bound_examples() {
        let (net, flows) = single_link(40e6, 12096.0);
        let both = ActiveSet::all(&flows);
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &both,
            filter: CapacityFilter::include_all(),
            l_max: 12096.0,
        };
        let rates = [20e6, 20e6];
        let single = ctx.delay_bound(FlowId(0), &rates, BoundVariant::SingleTerm).unwrap();
        assert!(close(single, 6.048e-4, 1e-12));
        let over = ctx.delay_bound(FlowId(0), &rates, BoundVariant::Overestimate).unwrap();
        assert!(close(over, 1.2096e-3, 1e-12));

        let (net, flows) = three_host();
        let alone: ActiveSet = [FlowId(0)].into_iter().collect();
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &alone,
            filter: CapacityFilter::include_all(),
            l_max: 12144.0,
        };
        let d = ctx.delay_bound(FlowId(0), &[100e6, 0.0, 0.0], BoundVariant::Packetized).unwrap();
        assert!(close(d, 3.6432e-4, 1e-12));
    }

    #[test]
    fn delay_bound_undefined_on_saturation() {
        let (net, flows) = single_link(40e6, 12096.0);
        let both = ActiveSet::all(&flows);
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &both,
            filter: CapacityFilter::include_all(),
            l_max: 12096.0,
        };
        for v in BoundVariant::ALL {
            let err = ctx.delay_bound(FlowId(0), &[1e6, 40e6], v).unwrap_err();
            assert!(matches!(err, NetCalcError::BoundUndefined { flow: FlowId(0), .. }), "{v}");
        }
        let inactive: ActiveSet = [FlowId(1)].into_iter().collect();
        let ctx = BoundContext { active: &inactive, ..ctx };
        assert_eq!(
            ctx.delay_bound(FlowId(0), &[1e6, 1e6], BoundVariant::Tight),
            Err(NetCalcError::InactiveFlow(FlowId(0)))
        );
    }

    #[test]
    fn variant_names_round_trip() {
        for v in BoundVariant::ALL {
            assert_eq!(v.as_str().parse::<BoundVariant>().unwrap(), v);
        }
        assert!("nope".parse::<BoundVariant>().is_err());
    }

    fn convex_curve() -> impl Strategy<Value = PiecewiseLinearCurve> {
        (0.0f64..5.0, prop::collection::vec((0.05f64..2.0, 0.0f64..10.0), 0..4), 0.0f64..10.0).prop_map(
            |(origin, mut pieces, tail)| {
                pieces.sort_by(|a, b| a.1.total_cmp(&b.1));
                let tail = tail.max(pieces.last().map(|p| p.1).unwrap_or(0.0));
                let mut segs = Vec::new();
                let (mut start, mut value) = (0.0, origin);
                for (len, slope) in pieces {
                    segs.push(Segment { start, value, slope });
                    start += len;
                    value += len * slope;
                }
                segs.push(Segment { start, value, slope: tail });
                PiecewiseLinearCurve::new(segs).unwrap()
            },
        )
    }

    /// Shared topology where every flow crosses every link.
    fn all_share(caps: &[f64], n: usize, sigma: f64) -> (Network, Vec<FlowSpec>) {
        let mut net = Network::new();
        let nodes: Vec<NodeId> = (0..=caps.len()).map(|i| net.add_node(format!("v{i}"))).collect();
        let path: Vec<EdgeId> = caps
            .iter()
            .enumerate()
            .map(|(i, &c)| net.add_edge(format!("l{i}"), nodes[i], nodes[i + 1], c, 0.0))
            .collect();
        let flows = (0..n)
            .map(|i| FlowSpec {
                id: FlowId(i),
                source: nodes[0],
                destination: nodes[caps.len()],
                path: path.clone(),
                sigma,
                rate_min: 1e6,
                rate_max: 100e6,
                delay_target: 1e-3,
                utility_weight: 1e5,
                join_time: 0.0,
                leave_time: 1.0,
            })
            .collect();
        (net, flows)
    }

    proptest! {
        #[test]
        fn convolution_matches_grid_infimum(f in convex_curve(), g in convex_curve()) {
            let h = min_plus_convolve(&f, &g).unwrap();
            prop_assert!(h.is_convex());
            let step = 1e-3;
            let max_slope = f.segments().iter().chain(g.segments()).map(|s| s.slope).fold(0.0, f64::max);
            for i in 0..=60 {
                let t = i as f64 * 0.1;
                let brute = grid_inf(&f, &g, t, step);
                let exact = h.eval(t);
                prop_assert!(exact <= brute + 1e-9, "t={} exact={} brute={}", t, exact, brute);
                prop_assert!(brute - exact <= max_slope * step + 1e-9, "t={} exact={} brute={}", t, exact, brute);
            }
        }

        #[test]
        fn concat_equals_folded_convolution(servers in prop::collection::vec((1e6f64..1e9, 0.0f64..1e-2), 1..5)) {
            let servers: Vec<_> = servers.into_iter().map(|(r, t)| RateLatencyCurve::new(r, t).unwrap()).collect();
            let closed = concat_rate_latency(&servers).unwrap();
            let folded = servers[1..].iter().try_fold(servers[0].to_curve(), |acc, s| min_plus_convolve(&acc, &s.to_curve())).unwrap();
            prop_assert_eq!(closed.to_curve(), folded);
        }

        #[test]
        fn blind_multiplex_is_increasing(c in 1e6f64..1e9, frac in 0.0f64..0.999, sigma in 0.0f64..1e5, extra in 0.0f64..2e4) {
            let cross = TokenBucketCurve::new(sigma, c * frac).unwrap();
            let b = blind_multiplex(c, cross, extra).unwrap();
            let curve = b.to_curve();
            prop_assert!(PiecewiseLinearCurve::new(curve.segments().to_vec()).is_ok());
            prop_assert!(b.rate > 0.0 && b.latency >= 0.0);
        }

        #[test]
        fn tight_never_exceeds_overestimate(x in prop::collection::vec(1e6f64..40e6, 3), mask in 1u8..8) {
            let (net, flows) = three_host();
            let active: ActiveSet = (0..3).filter(|i| mask & (1 << i) != 0).map(FlowId).collect();
            let ctx = BoundContext { net: &net, flows: &flows, active: &active, filter: CapacityFilter::include_all(), l_max: 12144.0 };
            for s in active.iter() {
                let tight = ctx.delay_bound(s, &x, BoundVariant::Tight);
                let over = ctx.delay_bound(s, &x, BoundVariant::Overestimate);
                if let (Ok(t), Ok(o)) = (tight, over) {
                    prop_assert!(t <= o * (1.0 + 1e-12), "flow {} tight {} over {}", s, t, o);
                }
            }
        }

        #[test]
        fn bound_paths_agree_when_all_flows_share_all_links(
            caps in prop::collection::vec(50e6f64..500e6, 1..4),
            n in 1usize..4,
            frac in prop::collection::vec(0.0f64..0.3, 3),
        ) {
            let sigma = 12144.0;
            let (net, flows) = all_share(&caps, n, sigma);
            let active = ActiveSet::all(&flows);
            let cm = caps.iter().copied().fold(f64::INFINITY, f64::min);
            let rates: Vec<f64> = (0..n).map(|i| frac[i] * cm / n as f64).collect();
            let ctx = BoundContext { net: &net, flows: &flows, active: &active, filter: CapacityFilter::include_all(), l_max: sigma };
            for s in active.iter() {
                let own = TokenBucketCurve::new(sigma, rates[s.0]).unwrap();
                let pkt = ctx.delay_bound(s, &rates, BoundVariant::Packetized).unwrap();
                let via_curve = horizontal_deviation(own, ctx.effective_service_curve(s, &rates, true).unwrap()).unwrap();
                prop_assert!(close(pkt, via_curve, 1e-12), "packetized {} vs {}", pkt, via_curve);

                // the fluid pre-inequality sum never exceeds the closed form,
                // and they coincide on equal capacities
                let over = ctx.delay_bound(s, &rates, BoundVariant::Overestimate).unwrap();
                let fluid = horizontal_deviation(own, ctx.effective_service_curve(s, &rates, false).unwrap()).unwrap();
                prop_assert!(fluid <= over * (1.0 + 1e-12));
                if caps.iter().all(|&c| c == caps[0]) {
                    prop_assert!(close(fluid, over, 1e-12));
                }
            }
        }

        #[test]
        fn bounds_monotone_in_cross_rates(x in prop::collection::vec(1e6f64..30e6, 3), bump in 0.0f64..5e6, j in 0usize..3) {
            let (net, flows) = three_host();
            let active = ActiveSet::all(&flows);
            let ctx = BoundContext { net: &net, flows: &flows, active: &active, filter: CapacityFilter::include_all(), l_max: 12144.0 };
            let mut bumped = x.clone();
            bumped[j] += bump;
            for s in active.iter().filter(|&s| s.0 != j) {
                for v in BoundVariant::ALL {
                    if let (Ok(a), Ok(b)) = (ctx.delay_bound(s, &x, v), ctx.delay_bound(s, &bumped, v)) {
                        prop_assert!(b >= a, "{} flow {}: {} -> {}", v, s, a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn tight_never_exceeds_overestimate_when_all_share() {
        let (net, flows) = all_share(&[100e6, 128e6], 3, 12144.0);
        let active = ActiveSet::all(&flows);
        let ctx = BoundContext {
            net: &net,
            flows: &flows,
            active: &active,
            filter: CapacityFilter::include_all(),
            l_max: 12144.0,
        };
        let rates = [10e6, 20e6, 30e6];
        for s in active.iter() {
            let t = ctx.delay_bound(s, &rates, BoundVariant::Tight).unwrap();
            let o = ctx.delay_bound(s, &rates, BoundVariant::Overestimate).unwrap();
            assert!(close(t, o, 1e-12));
        }
    }
}
