use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::netcalc::BoundContext;
use crate::numopt::{
    dual_descent_solve_from, optimal_rate, update_edge_price, update_source_price, FluidProblem, LogUtility,
    PriceVector,
};
use crate::rem::{edge_mark_probability, MarkEstimator};
use crate::scenario::Mode;
use crate::topology::{ActiveSet, EdgeId, FlowId};

use super::audit::{Auditor, RateLog};
use super::trace::{Departure, EdgeRecord, FlowCounters, FlowRecord, TraceLog};
use super::SimConfig;

/// Token shortfall below which a packet may leave; absorbs rounding in refill times.
const TOKEN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
struct Packet {
    flow: FlowId,
    bits: f64,
    marked: bool,
    created: f64,
    /// Index into the flow's path of the link it is heading to.
    hop: usize,
    /// Earliest start of any busy period the packet was served in.
    earliest_busy: f64,
}

#[derive(Debug)]
enum Kind {
    Join(FlowId),
    Leave(FlowId),
    Tick,
    TokenReady {
        flow: FlowId,
        gen: u64,
    },
    /// Arrival at `pkt.hop`, or delivery when the hop is past the path end.
    Arrival(Packet),
    TxDone(EdgeId),
    Ack {
        flow: FlowId,
        marked: bool,
    },
    /// Marking tables computed `control_delay` earlier.
    PricePush(Vec<Vec<f64>>),
}

struct Event {
    time: f64,
    seq: u64,
    kind: Kind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // reversed: BinaryHeap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Link {
    queue: VecDeque<Packet>,
    queue_bits: f64,
    busy: bool,
    busy_since: f64,
    /// Per-flow mark probability.
    marks: Vec<f64>,
    arrived_bits: f64,
    sent_bits: f64,
}

struct Host {
    active: bool,
    tokens: f64,
    last_refill: f64,
    rate: f64,
    gen: u64,
    estimator: MarkEstimator,
    got_feedback: bool,
    price_estimate: f64,
    delay_sum: f64,
    delay_max: f64,
    delay_count: u64,
    acks: u64,
    acks_marked: u64,
    /// Bits entering the first link this interval.
    first_hop_bits: f64,
}

pub(super) struct Engine<'a> {
    cfg: &'a SimConfig,
    now: f64,
    seq: u64,
    events: BinaryHeap<Event>,
    rng: ChaCha8Rng,
    links: Vec<Link>,
    hosts: Vec<Host>,
    active: ActiveSet,
    prices: PriceVector,
    /// Sum of propagation delays per flow path; the ack return latency.
    return_delay: Vec<f64>,
    rates: RateLog,
    auditor: Auditor<'a>,
    trace: TraceLog,
    tick: u64,
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a SimConfig) -> Self {
        let n_flows = cfg.flows.len();
        let links = cfg.net.edges.iter().map(|_| Link { marks: vec![0.0; n_flows], ..Link::default() }).collect();
        let hosts = cfg
            .flows
            .iter()
            .map(|_| Host {
                active: false,
                tokens: 0.0,
                last_refill: 0.0,
                rate: 0.0,
                gen: 0,
                estimator: MarkEstimator::new(cfg.estimator_mode, cfg.window_ticks),
                got_feedback: false,
                price_estimate: 0.0,
                delay_sum: 0.0,
                delay_max: 0.0,
                delay_count: 0,
                acks: 0,
                acks_marked: 0,
                first_hop_bits: 0.0,
            })
            .collect();
        let return_delay =
            cfg.flows.iter().map(|f| f.path.iter().map(|e| cfg.net.edges[e.0].propagation_delay).sum()).collect();
        let mut eng = Self {
            cfg,
            now: 0.0,
            seq: 0,
            events: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            links,
            hosts,
            active: ActiveSet::new(),
            prices: PriceVector::zeros(cfg.net.edges.len(), n_flows),
            return_delay,
            rates: RateLog::new(n_flows),
            auditor: Auditor::new(&cfg.net, &cfg.flows, cfg.filter, cfg.l_max, cfg.audit_horizon),
            trace: TraceLog { counters: vec![FlowCounters::default(); n_flows], ..TraceLog::default() },
            tick: 0,
        };
        for f in &cfg.flows {
            if f.join_time < cfg.duration {
                eng.schedule(f.join_time, Kind::Join(f.id));
                if f.leave_time < cfg.duration {
                    eng.schedule(f.leave_time, Kind::Leave(f.id));
                }
            }
        }
        eng.schedule(cfg.update_interval, Kind::Tick);
        eng
    }

    fn schedule(&mut self, time: f64, kind: Kind) {
        self.seq += 1;
        self.events.push(Event { time, seq: self.seq, kind });
    }

    pub fn run(mut self) -> TraceLog {
        while let Some(ev) = self.events.pop() {
            if ev.time > self.cfg.duration {
                self.events.push(ev);
                break;
            }
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            match ev.kind {
                Kind::Join(f) => self.on_join(f),
                Kind::Leave(f) => self.on_leave(f),
                Kind::Tick => self.on_tick(),
                Kind::TokenReady { flow, gen } => self.on_token(flow, gen),
                Kind::Arrival(p) => self.arrive(p),
                Kind::TxDone(e) => self.on_tx_done(e),
                Kind::Ack { flow, marked } => self.on_ack(flow, marked),
                Kind::PricePush(tables) => self.install_marks(tables),
            }
        }
        self.finish()
    }

    fn finish(mut self) -> TraceLog {
        for link in &self.links {
            for p in &link.queue {
                self.trace.counters[p.flow.0].in_network += 1;
            }
        }
        for ev in self.events.iter() {
            if let Kind::Arrival(p) = &ev.kind {
                self.trace.counters[p.flow.0].in_network += 1;
            }
        }
        self.trace.audit = self.auditor.stats;
        self.trace
    }

    fn set_rate(&mut self, flow: FlowId, rate: f64) {
        self.refill(flow);
        let h = &mut self.hosts[flow.0];
        h.rate = rate;
        h.gen += 1;
        let gen = h.gen;
        self.rates.set(flow, self.now, rate);
        self.schedule(self.now, Kind::TokenReady { flow, gen });
    }

    fn refill(&mut self, flow: FlowId) {
        let sigma = self.cfg.flows[flow.0].sigma;
        let h = &mut self.hosts[flow.0];
        h.tokens = (h.tokens + h.rate * (self.now - h.last_refill)).min(sigma);
        h.last_refill = self.now;
    }

    fn on_join(&mut self, flow: FlowId) {
        let spec = &self.cfg.flows[flow.0];
        let h = &mut self.hosts[flow.0];
        h.active = true;
        h.tokens = spec.sigma;
        h.last_refill = self.now;
        h.rate = 0.0;
        h.got_feedback = false;
        h.estimator = MarkEstimator::new(self.cfg.estimator_mode, self.cfg.window_ticks);
        h.price_estimate = 0.0;
        self.active.insert(flow);
        self.prices.source[flow.0] = 0.0;
        let rate_min = spec.rate_min;
        if self.cfg.mode == Mode::Proactive && self.proactive_install() {
            return;
        }
        self.set_rate(flow, rate_min);
    }

    /// Solves the fluid problem for the current active set and installs its
    /// prices, marks, rates and matching estimator state. False on
    /// non-convergence, leaving state untouched.
    fn proactive_install(&mut self) -> bool {
        let cfg = self.cfg;
        let problem = FluidProblem {
            net: cfg.net.clone(),
            flows: cfg.flows.clone(),
            active: self.active.clone(),
            filter: cfg.filter,
            l_max: cfg.l_max,
            variant: cfg.variant,
        };
        let solved = dual_descent_solve_from(
            &problem,
            &cfg.steps,
            self.prices.clone(),
            cfg.solver_max_iters,
            cfg.solver_rate_tol,
        );
        let res = match solved {
            Ok(r) if r.converged => r,
            Ok(r) => {
                log::warn!(
                    "fluid solve at t={} did not converge after {} sweeps; joining reactively",
                    self.now,
                    r.iterations
                );
                self.trace.proactive_fallbacks.push((self.now, self.active.iter().last().unwrap()));
                return false;
            }
            Err(e) => {
                log::warn!("fluid solve at t={} failed: {e}; joining reactively", self.now);
                return false;
            }
        };
        self.prices = res.prices;
        let tables = self.mark_tables();
        self.install_marks(tables);
        let window = (cfg.window_ticks.saturating_sub(1)).max(1) as f64 * cfg.update_interval;
        let ids: Vec<FlowId> = self.active.iter().collect();
        for s in ids {
            let rate = res.rates[s.0];
            let q = self.prices.total(&cfg.flows[s.0], &self.active);
            let total = (rate * window / cfg.packet_size).round().max(1.0);
            let marked = (total * -(-cfg.mark_scale * q).exp_m1()).round();
            let h = &mut self.hosts[s.0];
            h.estimator.seed(marked as u64, total as u64);
            h.price_estimate = q;
            h.got_feedback = true;
            self.set_rate(s, rate);
        }
        true
    }

    fn on_leave(&mut self, flow: FlowId) {
        self.refill(flow);
        let h = &mut self.hosts[flow.0];
        h.active = false;
        h.gen += 1;
        h.rate = 0.0;
        self.rates.set(flow, self.now, 0.0);
        self.active.remove(flow);
        self.prices.source[flow.0] = 0.0;
        for link in &mut self.links {
            link.marks[flow.0] = 0.0;
        }
    }

    fn on_token(&mut self, flow: FlowId, gen: u64) {
        let h = &self.hosts[flow.0];
        if !h.active || h.gen != gen || h.rate <= 0.0 {
            return;
        }
        self.refill(flow);
        let size = self.cfg.packet_size;
        let h = &self.hosts[flow.0];
        let deficit = size - h.tokens;
        // a deficit too small to advance the clock counts as met
        if deficit <= TOKEN_EPS || self.now + deficit / h.rate <= self.now {
            let h = &mut self.hosts[flow.0];
            h.tokens = (h.tokens - size).max(0.0);
            self.trace.counters[flow.0].emitted += 1;
            let pkt =
                Packet { flow, bits: size, marked: false, created: self.now, hop: 0, earliest_busy: f64::INFINITY };
            self.arrive(pkt);
        }
        let h = &self.hosts[flow.0];
        let wait = ((size - h.tokens).max(0.0)) / h.rate;
        self.schedule(self.now + wait, Kind::TokenReady { flow, gen });
    }

    fn arrive(&mut self, mut pkt: Packet) {
        let path = &self.cfg.flows[pkt.flow.0].path;
        if pkt.hop == path.len() {
            self.deliver(pkt);
            return;
        }
        let e = path[pkt.hop];
        // one draw per hop keeps the random stream independent of mark state
        let u: f64 = self.rng.gen();
        let link = &mut self.links[e.0];
        if u < link.marks[pkt.flow.0] {
            pkt.marked = true;
        }
        link.arrived_bits += pkt.bits;
        if pkt.hop == 0 {
            self.hosts[pkt.flow.0].first_hop_bits += pkt.bits;
        }
        if !link.busy {
            link.busy_since = self.now;
        }
        pkt.earliest_busy = pkt.earliest_busy.min(link.busy_since);
        link.queue_bits += pkt.bits;
        link.queue.push_back(pkt);
        if !link.busy {
            link.busy = true;
            let done = self.now + pkt.bits / self.cfg.net.edges[e.0].capacity;
            self.schedule(done, Kind::TxDone(e));
        }
    }

    fn on_tx_done(&mut self, e: EdgeId) {
        let link = &mut self.links[e.0];
        let mut pkt = link.queue.pop_front().expect("transmission completes only on a busy link");
        link.queue_bits -= pkt.bits;
        link.sent_bits += pkt.bits;
        let next = link.queue.front().map(|p| p.bits);
        match next {
            Some(bits) => {
                let done = self.now + bits / self.cfg.net.edges[e.0].capacity;
                self.schedule(done, Kind::TxDone(e));
            }
            None => {
                link.busy = false;
                link.queue_bits = 0.0;
            }
        }
        if self.cfg.record_departures {
            self.trace.departures.push(Departure { edge: e, flow: pkt.flow, time: self.now, bits: pkt.bits });
        }
        pkt.hop += 1;
        let prop = self.cfg.net.edges[e.0].propagation_delay;
        if prop > 0.0 {
            self.schedule(self.now + prop, Kind::Arrival(pkt));
        } else {
            self.arrive(pkt);
        }
    }

    fn deliver(&mut self, pkt: Packet) {
        let s = pkt.flow;
        let delay = self.now - pkt.created;
        self.trace.counters[s.0].delivered += 1;
        let h = &mut self.hosts[s.0];
        h.delay_sum += delay;
        h.delay_max = h.delay_max.max(delay);
        h.delay_count += 1;
        self.auditor.check(s, pkt.created, self.now, pkt.earliest_busy, &self.rates);
        let back = self.return_delay[s.0];
        if back > 0.0 {
            self.schedule(self.now + back, Kind::Ack { flow: s, marked: pkt.marked });
        } else {
            self.on_ack(s, pkt.marked);
        }
    }

    fn on_ack(&mut self, flow: FlowId, marked: bool) {
        let h = &mut self.hosts[flow.0];
        if !h.active {
            return;
        }
        h.estimator.record(marked);
        h.acks += 1;
        h.acks_marked += u64::from(marked);
        h.got_feedback = true;
    }

    /// Per-link, per-flow mark probabilities from the current prices.
    fn mark_tables(&self) -> Vec<Vec<f64>> {
        let cfg = self.cfg;
        let k = cfg.mark_scale;
        let mut tables = vec![vec![0.0; cfg.flows.len()]; cfg.net.edges.len()];
        for s in self.active.iter() {
            let flow = &cfg.flows[s.0];
            let others = self.prices.others_source_price(s, &self.active);
            for &e in &flow.path {
                tables[e.0][s.0] = edge_mark_probability(k * others, flow.path.len(), k * self.prices.edge[e.0]);
            }
        }
        tables
    }

    fn install_marks(&mut self, tables: Vec<Vec<f64>>) {
        for (link, mut marks) in self.links.iter_mut().zip(tables) {
            // flows that left since the tables were computed stay unmarked
            for (s, m) in marks.iter_mut().enumerate() {
                if !self.active.contains(FlowId(s)) {
                    *m = 0.0;
                }
            }
            link.marks = marks;
        }
    }

    fn on_tick(&mut self) {
        let cfg = self.cfg;
        let dt = cfg.update_interval;
        self.tick += 1;

        // controller: edge prices from offered load, source prices from first-hop rates
        let measured: Vec<f64> = self.hosts.iter().map(|h| h.first_hop_bits / dt).collect();
        for (e, link) in self.links.iter().enumerate() {
            let load = link.arrived_bits / dt;
            self.prices.edge[e] =
                update_edge_price(self.prices.edge[e], cfg.net.edges[e].capacity, load, cfg.steps.edge[e]);
        }
        let ctx = BoundContext {
            net: &cfg.net,
            flows: &cfg.flows,
            active: &self.active,
            filter: cfg.filter,
            l_max: cfg.l_max,
        };
        let mut next_source = self.prices.source.clone();
        for s in self.active.iter() {
            match update_source_price(self.prices.source[s.0], &ctx, s, &measured, cfg.steps.source[s.0], cfg.variant) {
                Ok(p) => next_source[s.0] = p,
                Err(e) => log::warn!("source price for flow {s} not updated: {e}"),
            }
        }
        self.prices.source = next_source;
        let tables = self.mark_tables();
        if cfg.control_delay > 0.0 {
            self.schedule(self.now + cfg.control_delay, Kind::PricePush(tables));
        } else {
            self.install_marks(tables);
        }

        for (e, link) in self.links.iter_mut().enumerate() {
            let cap = cfg.net.edges[e].capacity;
            self.trace.edges.push(EdgeRecord {
                time: self.now,
                edge: EdgeId(e),
                price: self.prices.edge[e],
                utilization: link.sent_bits / (cap * dt),
                queue_bits: link.queue_bits,
            });
            link.arrived_bits = 0.0;
            link.sent_bits = 0.0;
        }

        // hosts: fold the interval's feedback into a rate
        let ids: Vec<FlowId> = self.active.iter().collect();
        for &s in &ids {
            let h = &mut self.hosts[s.0];
            let est = h.estimator.close_interval() / cfg.mark_scale;
            h.price_estimate = est;
            if h.got_feedback {
                let flow = &cfg.flows[s.0];
                let rate = optimal_rate(est, flow, &LogUtility::new(flow.utility_weight));
                if rate != h.rate {
                    self.set_rate(s, rate);
                }
            }
        }
        let bucket: Vec<f64> = self.hosts.iter().map(|h| if h.active { h.rate } else { 0.0 }).collect();
        let ctx = BoundContext {
            net: &cfg.net,
            flows: &cfg.flows,
            active: &self.active,
            filter: cfg.filter,
            l_max: cfg.l_max,
        };
        for &s in &ids {
            let bound = ctx.delay_bound(s, &bucket, cfg.variant).unwrap_or(f64::INFINITY);
            let h = &self.hosts[s.0];
            let (mean_delay, max_delay) = if h.delay_count > 0 {
                (Some(h.delay_sum / h.delay_count as f64), Some(h.delay_max))
            } else {
                (None, None)
            };
            self.trace.flows.push(FlowRecord {
                time: self.now,
                flow: s,
                rate: h.rate,
                bound,
                mean_delay,
                max_delay,
                marked: h.acks_marked,
                total: h.acks,
                price_estimate: h.price_estimate,
                source_price: self.prices.source[s.0],
            });
        }
        for h in &mut self.hosts {
            h.delay_sum = 0.0;
            h.delay_max = 0.0;
            h.delay_count = 0;
            h.acks = 0;
            h.acks_marked = 0;
            h.first_hop_bits = 0.0;
        }

        let next = (self.tick + 1) as f64 * dt;
        if next <= cfg.duration {
            self.schedule(next, Kind::Tick);
        }
    }
}
