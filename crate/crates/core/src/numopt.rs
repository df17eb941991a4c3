//! Network utility maximization under delay-bound constraints: utilities,
//! the per-source optimal rate, projected price updates, a synchronous
//! fluid solver and a brute-force primal oracle.

use thiserror::Error;

use crate::netcalc::{BoundContext, BoundVariant, NetCalcError};
use crate::topology::{sources_on_edge, ActiveSet, CapacityFilter, EdgeId, FlowId, FlowSpec, Network};

/// Consecutive quiet sweeps required to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumOptError {
    #[error("no active flows")]
    NoActiveFlows,
    #[error("flow {0} is not active")]
    InactiveFlow(FlowId),
    #[error("no feasible point on the search grid")]
    Infeasible,
    #[error("dual value is only defined for linear bound variants, not {0}")]
    NonLinearVariant(BoundVariant),
    #[error(transparent)]
    NetCalc(#[from] NetCalcError),
}

pub trait Utility {
    fn value(&self, x: f64) -> f64;
    fn derivative(&self, x: f64) -> f64;
    /// Rate at which the marginal utility equals `price`; +inf for price <= 0.
    fn inverse_derivative(&self, price: f64) -> f64;
}

/// U(x) = a ln(1 + x)
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogUtility {
    pub weight: f64,
}

impl LogUtility {
    pub fn new(weight: f64) -> Self {
        debug_assert!(weight > 0.0);
        Self { weight }
    }
}

impl Utility for LogUtility {
    fn value(&self, x: f64) -> f64 {
        self.weight * x.ln_1p()
    }

    fn derivative(&self, x: f64) -> f64 {
        self.weight / (1.0 + x)
    }

    fn inverse_derivative(&self, price: f64) -> f64 {
        if price <= 0.0 {
            f64::INFINITY
        } else {
            self.weight / price - 1.0
        }
    }
}

/// Edge prices indexed by `EdgeId`, source prices indexed by `FlowId`.
/// Every entry stays non-negative.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PriceVector {
    pub edge: Vec<f64>,
    pub source: Vec<f64>,
}

impl PriceVector {
    pub fn zeros(n_edges: usize, n_flows: usize) -> Self {
        Self { edge: vec![0.0; n_edges], source: vec![0.0; n_flows] }
    }

    /// p_{-s}: sum of the other active sources' prices.
    pub fn others_source_price(&self, flow: FlowId, active: &ActiveSet) -> f64 {
        active.iter().filter(|&j| j != flow).map(|j| self.source[j.0]).sum()
    }

    /// p^s: sum of edge prices along the path.
    pub fn path_price(&self, flow: &FlowSpec) -> f64 {
        flow.path.iter().map(|e| self.edge[e.0]).sum()
    }

    /// p_{-s} + p^s
    pub fn total(&self, flow: &FlowSpec, active: &ActiveSet) -> f64 {
        self.others_source_price(flow.id, active) + self.path_price(flow)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSizes {
    pub edge: Vec<f64>,
    pub source: Vec<f64>,
}

impl StepSizes {
    pub fn uniform(n_edges: usize, n_flows: usize, gamma_e: f64, gamma_j: f64) -> Self {
        debug_assert!(gamma_e > 0.0 && gamma_j > 0.0);
        Self { edge: vec![gamma_e; n_edges], source: vec![gamma_j; n_flows] }
    }
}

/// clamp(U'^{-1}(q), m_s, M_s) with q = p_{-s} + p^s.
pub fn optimal_rate(price_sum: f64, flow: &FlowSpec, util: &impl Utility) -> f64 {
    flow.clamp_rate(util.inverse_derivative(price_sum))
}

/// p_e <- [p_e - gamma_e (c_e - sum of rates on e)]^+
pub fn update_edge_price(price: f64, capacity: f64, load: f64, gamma_e: f64) -> f64 {
    (price - gamma_e * (capacity - load)).max(0.0)
}

/// p_j <- [p_j - gamma_j (denominator - numerator / d_j)]^+ using the terms of
/// the selected bound variant.
pub fn update_source_price(
    price: f64,
    ctx: &BoundContext<'_>,
    flow: FlowId,
    rates: &[f64],
    gamma_j: f64,
    variant: BoundVariant,
) -> Result<f64, NumOptError> {
    if ctx.active.is_empty() {
        return Err(NumOptError::NoActiveFlows);
    }
    if !ctx.active.contains(flow) {
        return Err(NumOptError::InactiveFlow(flow));
    }
    let terms = ctx.bound_terms(flow, rates, variant)?;
    let slack = terms.slack(ctx.flows[flow.0].delay_target);
    Ok((price - gamma_j * slack).max(0.0))
}

/// A fluid NUM instance: the network, declared flows, which of them are
/// present and how their delay bound is formed.
#[derive(Debug, Clone, PartialEq)]
pub struct FluidProblem {
    pub net: Network,
    pub flows: Vec<FlowSpec>,
    pub active: ActiveSet,
    pub filter: CapacityFilter,
    /// bits
    pub l_max: f64,
    pub variant: BoundVariant,
}

impl FluidProblem {
    pub fn context(&self) -> BoundContext<'_> {
        BoundContext {
            net: &self.net,
            flows: &self.flows,
            active: &self.active,
            filter: self.filter,
            l_max: self.l_max,
        }
    }

    pub fn utility(&self, flow: FlowId) -> LogUtility {
        LogUtility::new(self.flows[flow.0].utility_weight)
    }

    /// Sum of utilities over active flows.
    pub fn objective(&self, rates: &[f64]) -> f64 {
        self.active.iter().map(|s| self.utility(s).value(rates[s.0])).sum()
    }

    /// Rate each active source picks against `prices`; inactive entries are 0.
    pub fn best_response(&self, prices: &PriceVector) -> Vec<f64> {
        let mut rates = vec![0.0; self.flows.len()];
        for s in self.active.iter() {
            let flow = &self.flows[s.0];
            rates[s.0] = optimal_rate(prices.total(flow, &self.active), flow, &self.utility(s));
        }
        rates
    }

    /// Summed active rate per edge.
    pub fn edge_loads(&self, rates: &[f64]) -> Vec<f64> {
        let mut load = vec![0.0; self.net.edges.len()];
        for s in self.active.iter() {
            for e in &self.flows[s.0].path {
                load[e.0] += rates[s.0];
            }
        }
        load
    }

    /// Delay and capacity constraints with a small absolute slack allowance
    /// (bits/second) for rounding.
    pub fn is_feasible(&self, rates: &[f64], tol: f64) -> bool {
        let loads = self.edge_loads(rates);
        if loads.iter().zip(&self.net.edges).any(|(l, e)| *l > e.capacity + tol) {
            return false;
        }
        let ctx = self.context();
        self.active.iter().all(|s| self.delay_ok(&ctx, s, rates, tol))
    }

    fn delay_ok(&self, ctx: &BoundContext<'_>, s: FlowId, rates: &[f64], tol: f64) -> bool {
        match ctx.bound_terms(s, rates, self.variant) {
            Ok(t) => t.denominator > 0.0 && t.slack(self.flows[s.0].delay_target) >= -tol,
            Err(_) => false,
        }
    }

    /// Edges crossed by at least one active flow.
    pub fn used_edges(&self) -> Vec<EdgeId> {
        (0..self.net.edges.len())
            .map(EdgeId)
            .filter(|&e| {
                sources_on_edge(&self.net, &self.flows, &self.active, e).map(|s| !s.is_empty()).unwrap_or(false)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    /// Indexed by `FlowId`; inactive flows are 0.
    pub rates: Vec<f64>,
    pub prices: PriceVector,
    pub iterations: usize,
    pub converged: bool,
    /// Largest per-flow rate change in the last sweep, bits/second.
    pub last_change: f64,
}

/// One synchronous sweep: rates from current prices, then every edge price,
/// then every source price. Returns the rates used.
pub fn dual_descent_step(
    problem: &FluidProblem,
    steps: &StepSizes,
    prices: &mut PriceVector,
) -> Result<Vec<f64>, NumOptError> {
    let rates = problem.best_response(prices);
    let loads = problem.edge_loads(&rates);
    for e in problem.used_edges() {
        prices.edge[e.0] = update_edge_price(prices.edge[e.0], problem.net.capacity(e), loads[e.0], steps.edge[e.0]);
    }
    let ctx = problem.context();
    let mut next = prices.source.clone();
    for s in problem.active.iter() {
        next[s.0] = update_source_price(prices.source[s.0], &ctx, s, &rates, steps.source[s.0], problem.variant)?;
    }
    prices.source = next;
    Ok(rates)
}

/// Iterates `dual_descent_step` from `initial` prices until both the largest
/// rate change and the price residual stay below `rate_tol` for
/// `CONVERGENCE_WINDOW` sweeps, or
/// `max_iters` sweeps have run.
pub fn dual_descent_solve_from(
    problem: &FluidProblem,
    steps: &StepSizes,
    initial: PriceVector,
    max_iters: usize,
    rate_tol: f64,
) -> Result<SolveResult, NumOptError> {
    if problem.active.is_empty() {
        return Err(NumOptError::NoActiveFlows);
    }
    let mut prices = initial;
    let mut prev = problem.best_response(&prices);
    let mut calm = 0;
    let mut last_change = f64::INFINITY;
    for iter in 1..=max_iters {
        let before = prices.clone();
        dual_descent_step(problem, steps, &mut prices)?;
        let rates = problem.best_response(&prices);
        last_change = rates.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prev = rates;
        // Rates pinned at a clamp stop moving while prices still climb, so
        // the projected price step (in bits/second) must be small as well.
        let residual = price_residual(&before, &prices, steps);
        calm = if last_change < rate_tol && residual < rate_tol { calm + 1 } else { 0 };
        if calm >= CONVERGENCE_WINDOW {
            return Ok(SolveResult { rates: prev, prices, iterations: iter, converged: true, last_change });
        }
    }
    log::debug!("dual descent stopped after {max_iters} sweeps, last change {last_change} bps");
    Ok(SolveResult { rates: prev, prices, iterations: max_iters, converged: false, last_change })
}

/// Largest |Δp| / γ over all prices: the projected constraint violation or
/// slack that drove the last sweep.
fn price_residual(before: &PriceVector, after: &PriceVector, steps: &StepSizes) -> f64 {
    let edge = before.edge.iter().zip(&after.edge).zip(&steps.edge);
    let source = before.source.iter().zip(&after.source).zip(&steps.source);
    edge.chain(source).map(|((a, b), g)| (b - a).abs() / g).fold(0.0, f64::max)
}

/// `dual_descent_solve_from` starting at all-zero prices.
pub fn dual_descent_solve(
    problem: &FluidProblem,
    steps: &StepSizes,
    max_iters: usize,
    rate_tol: f64,
) -> Result<SolveResult, NumOptError> {
    let zero = PriceVector::zeros(problem.net.edges.len(), problem.flows.len());
    dual_descent_solve_from(problem, steps, zero, max_iters, rate_tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalSolution {
    pub rates: Vec<f64>,
    pub objective: f64,
}

/// Grid search for the utility maximizer. Every active flow but the last is
/// enumerated on m_s + k * step (capped at M_s); the last flow takes the
/// largest feasible grid value, found by bisection since every constraint
/// is monotone in its rate. Intended for 2-3 flows.
pub fn brute_force_primal(problem: &FluidProblem, grid_step: f64) -> Result<PrimalSolution, NumOptError> {
    let ids: Vec<FlowId> = problem.active.iter().collect();
    if ids.is_empty() {
        return Err(NumOptError::NoActiveFlows);
    }
    let grid = |s: FlowId| -> Vec<f64> {
        let f = &problem.flows[s.0];
        let n = ((f.rate_max - f.rate_min) / grid_step).floor() as usize;
        (0..=n).map(|k| (f.rate_min + k as f64 * grid_step).min(f.rate_max)).collect()
    };
    let grids: Vec<Vec<f64>> = ids.iter().map(|&s| grid(s)).collect();
    let tol = 1e-6;
    let mut rates = vec![0.0; problem.flows.len()];
    let mut best: Option<PrimalSolution> = None;
    search(problem, &ids, &grids, 0, &mut rates, tol, &mut best);
    best.ok_or(NumOptError::Infeasible)
}

fn search(
    problem: &FluidProblem,
    ids: &[FlowId],
    grids: &[Vec<f64>],
    depth: usize,
    rates: &mut Vec<f64>,
    tol: f64,
    best: &mut Option<PrimalSolution>,
) {
    let s = ids[depth];
    // unset flows sit at their minimum: a prefix infeasible there is infeasible everywhere
    for &j in &ids[depth + 1..] {
        rates[j.0] = problem.flows[j.0].rate_min;
    }
    let grid = &grids[depth];
    if depth + 1 == ids.len() {
        rates[s.0] = grid[0];
        if !problem.is_feasible(rates, tol) {
            return;
        }
        let (mut lo, mut hi) = (0usize, grid.len() - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            rates[s.0] = grid[mid];
            if problem.is_feasible(rates, tol) {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        rates[s.0] = grid[lo];
        let objective = problem.objective(rates);
        if best.as_ref().is_none_or(|b| objective > b.objective) {
            *best = Some(PrimalSolution { rates: rates.clone(), objective });
        }
        return;
    }
    for &x in grid {
        rates[s.0] = x;
        for &j in &ids[depth + 1..] {
            rates[j.0] = problem.flows[j.0].rate_min;
        }
        if !problem.is_feasible(rates, tol) {
            break;
        }
        search(problem, ids, grids, depth + 1, rates, tol, best);
    }
}

/// Lagrangian dual function for the linear bound variants:
/// sum_s B_s(q_s) + sum_s p_s (c_s^m - N_s / d_s) + sum_e p_e c_e, where
/// B_s(q) = max over [m_s, M_s] of U_s(x) - q x.
pub fn dual_value(prices: &PriceVector, problem: &FluidProblem) -> Result<f64, NumOptError> {
    if !problem.variant.is_linear() {
        return Err(NumOptError::NonLinearVariant(problem.variant));
    }
    if problem.active.is_empty() {
        return Err(NumOptError::NoActiveFlows);
    }
    let ctx = problem.context();
    let zero_rates = vec![0.0; problem.flows.len()];
    let mut y = 0.0;
    for s in problem.active.iter() {
        let flow = &problem.flows[s.0];
        let util = problem.utility(s);
        let q = prices.total(flow, &problem.active);
        let x = optimal_rate(q, flow, &util);
        y += util.value(x) - q * x;
        // with zero cross rates the denominator is c_s^m itself
        let terms = ctx.bound_terms(s, &zero_rates, problem.variant)?;
        y += prices.source[s.0] * terms.slack(flow.delay_target);
    }
    for e in problem.used_edges() {
        y += prices.edge[e.0] * problem.net.capacity(e);
    }
    Ok(y)
}
