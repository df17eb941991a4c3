//! Subcommands behind the `slicecc` binary. Every command returns a
//! serializable report; `simulate` and `twin` also write trace files.
//! All numbers in outputs are SI: bits/second, seconds, bits.

use std::fs::{self, File};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use slicecc_core::numopt::{brute_force_primal, dual_descent_solve, dual_value};
use slicecc_core::sim::trace::{epoch_summaries, join_transients, EpochSummary, JoinTransient};
use slicecc_core::sim::{self, AuditStats, FlowCounters};
use slicecc_core::topology::sources_on_edge;
use slicecc_core::{ActiveSet, BoundVariant, FlowId, FluidProblem, Mode, Scenario, SimConfig, TraceLog};

/// Fraction of each epoch, counted back from its end, treated as steady state.
pub const STEADY_FRACTION: f64 = 0.2;

/// Bound may exceed its target by this relative amount and still count as
/// satisfied; the solver stops within a fraction of a bit/second of the
/// constraint, which can land a hair on the wrong side.
pub const VERDICT_TOL: f64 = 1e-6;

/// Command-line overrides applied on top of the scenario file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub bound_variant: Option<BoundVariant>,
    pub mode: Option<Mode>,
    pub duration_s: Option<f64>,
}

pub fn load_scenario(path: &Path, ov: &Overrides) -> Result<Scenario> {
    let mut sc = Scenario::load(path)?;
    if let Some(seed) = ov.seed {
        sc.params.seed = seed;
    }
    if let Some(v) = ov.bound_variant {
        sc.params.bound_variant = v;
    }
    if let Some(m) = ov.mode {
        sc.params.mode = m;
    }
    if let Some(d) = ov.duration_s {
        // lifetimes that ran to the old end keep running to the new one
        let old = sc.schedule.duration_s;
        for life in sc.schedule.flows.values_mut() {
            if life.leave_s >= old {
                life.leave_s = d;
            }
        }
        sc.schedule.duration_s = d;
    }
    sc.validate()?;
    Ok(sc)
}

/// Parses "0,2" into flow ids, checking each exists.
pub fn parse_active(spec: Option<&str>, sc: &Scenario) -> Result<ActiveSet> {
    let n = sc.flows.len();
    let Some(spec) = spec else {
        return Ok((0..n).map(FlowId).collect());
    };
    let mut set = ActiveSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let id: usize = part.parse().with_context(|| format!("bad flow id {part:?}"))?;
        if id >= n {
            bail!("flow {id} does not exist (scenario has {n} flows)");
        }
        set.insert(FlowId(id));
    }
    Ok(set)
}

/// Parses "20e6,20e6" (bits/second), one value per active flow in id order.
pub fn parse_rates(spec: &str, active: &ActiveSet, n_flows: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = spec
        .split(',')
        .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad rate {v:?}")))
        .collect::<Result<_>>()?;
    if values.len() != active.len() {
        bail!("{} rates given for {} active flows", values.len(), active.len());
    }
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        bail!("rate {v} is not a non-negative number");
    }
    let mut rates = vec![0.0; n_flows];
    for (s, v) in active.iter().zip(values) {
        rates[s.0] = v;
    }
    Ok(rates)
}

fn problem(sc: &Scenario, active: ActiveSet) -> FluidProblem {
    FluidProblem {
        net: sc.network(),
        flows: sc.flows(),
        active,
        filter: sc.filter(),
        l_max: sc.l_max_bits(),
        variant: sc.params.bound_variant,
    }
}

fn bound_or_none(p: &FluidProblem, s: FlowId, rates: &[f64], variant: BoundVariant) -> Option<f64> {
    p.context().delay_bound(s, rates, variant).ok()
}

// ---------------------------------------------------------------- traces

#[derive(Serialize)]
struct FlowRow {
    time_s: f64,
    flow_id: usize,
    rate_bps: f64,
    bound_s: f64,
    mean_delay_s: Option<f64>,
    max_delay_s: Option<f64>,
    marked: u64,
    total: u64,
    price_estimate: f64,
    source_price: f64,
}

#[derive(Serialize)]
struct EdgeRow {
    time_s: f64,
    edge_id: usize,
    p_e: f64,
    utilization: f64,
    queue_bits: f64,
}

pub const FLOWS_CSV: &str = "flows.csv";
pub const EDGES_CSV: &str = "edges.csv";
pub const SUMMARY_JSON: &str = "summary.json";

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `flows.csv` and `edges.csv`; headers are written even when empty.
pub fn write_trace(dir: &Path, trace: &TraceLog) -> Result<()> {
    let path = dir.join(FLOWS_CSV);
    let mut w = csv_writer(&path)?;
    if trace.flows.is_empty() {
        w.write_record([
            "time_s",
            "flow_id",
            "rate_bps",
            "bound_s",
            "mean_delay_s",
            "max_delay_s",
            "marked",
            "total",
            "price_estimate",
            "source_price",
        ])?;
    }
    for r in &trace.flows {
        w.serialize(FlowRow {
            time_s: r.time,
            flow_id: r.flow.0,
            rate_bps: r.rate,
            bound_s: r.bound,
            mean_delay_s: r.mean_delay,
            max_delay_s: r.max_delay,
            marked: r.marked,
            total: r.total,
            price_estimate: r.price_estimate,
            source_price: r.source_price,
        })?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;

    let path = dir.join(EDGES_CSV);
    let mut w = csv_writer(&path)?;
    if trace.edges.is_empty() {
        w.write_record(["time_s", "edge_id", "p_e", "utilization", "queue_bits"])?;
    }
    for r in &trace.edges {
        w.serialize(EdgeRow {
            time_s: r.time,
            edge_id: r.edge.0,
            p_e: r.price,
            utilization: r.utilization,
            queue_bits: r.queue_bits,
        })?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

// ---------------------------------------------------------------- simulate

/// Fluid optimum for one epoch's active set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidReport {
    pub rates_bps: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    /// Lagrangian dual at the solver's prices; linear bound variants only.
    pub dual_objective: Option<f64>,
    pub duality_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    #[serde(flatten)]
    pub summary: EpochSummary,
    pub aggregate_rate_bps: f64,
    /// Present when the fluid comparison was requested.
    pub fluid: Option<FluidReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fallback {
    pub time_s: f64,
    pub flow: usize,
}

/// Contents of `summary.json`. The key set is fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub mode: Mode,
    pub bound_variant: BoundVariant,
    pub duration_s: f64,
    pub steady_fraction: f64,
    pub epochs: Vec<EpochReport>,
    pub transients: Vec<JoinTransient>,
    pub audit: AuditStats,
    pub counters: Vec<FlowCounters>,
    pub proactive_fallbacks: Vec<Fallback>,
}

fn fluid_report(sc: &Scenario, active: &[usize]) -> Result<FluidReport> {
    let p = problem(sc, active.iter().map(|&i| FlowId(i)).collect());
    let res = dual_descent_solve(&p, &sc.step_sizes(), sc.params.solver_max_iters, sc.params.solver_rate_tol_bps)?;
    let objective = p.objective(&res.rates);
    let dual_objective = dual_value(&res.prices, &p).ok();
    Ok(FluidReport {
        rates_bps: active.iter().map(|&i| res.rates[i]).collect(),
        objective,
        converged: res.converged,
        dual_objective,
        duality_gap: dual_objective.map(|d| d - objective),
    })
}

pub fn summarize(sc: &Scenario, cfg: &SimConfig, trace: &TraceLog, fluid: bool) -> Result<Summary> {
    let mut epochs = Vec::new();
    for summary in epoch_summaries(trace, &cfg.flows, cfg.net.edges.len(), cfg.duration, STEADY_FRACTION) {
        let fluid = if fluid && !summary.active_flows.is_empty() {
            Some(fluid_report(sc, &summary.active_flows)?)
        } else {
            None
        };
        epochs.push(EpochReport {
            aggregate_rate_bps: summary.mean_rate_bps.iter().fold(0.0, |a, r| a + r),
            summary,
            fluid,
        });
    }
    Ok(Summary {
        seed: cfg.seed,
        mode: cfg.mode,
        bound_variant: cfg.variant,
        duration_s: cfg.duration,
        steady_fraction: STEADY_FRACTION,
        epochs,
        transients: join_transients(trace, &cfg.flows, cfg.duration),
        audit: trace.audit,
        counters: trace.counters.clone(),
        proactive_fallbacks: trace
            .proactive_fallbacks
            .iter()
            .map(|&(time_s, f)| Fallback { time_s, flow: f.0 })
            .collect(),
    })
}

/// Runs the packet-level simulation and writes the three output files.
pub fn cmd_simulate(sc: &Scenario, out: &Path, fluid: bool) -> Result<Summary> {
    ensure_dir(out)?;
    let cfg = SimConfig::from_scenario(sc);
    let trace = sim::run(&cfg);
    write_trace(out, &trace)?;
    let summary = summarize(sc, &cfg, &trace, fluid)?;
    write_json(&out.join(SUMMARY_JSON), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------- solve

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub grid_step_bps: f64,
    pub rates_bps: Vec<f64>,
    pub objective: f64,
    /// Largest |solver - oracle| over active flows.
    pub max_rate_diff_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub bound_variant: BoundVariant,
    pub active_flows: Vec<usize>,
    pub rates_bps: Vec<f64>,
    pub bounds_s: Vec<Option<f64>>,
    pub edge_prices: Vec<f64>,
    pub source_prices: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub dual_objective: Option<f64>,
    pub duality_gap: Option<f64>,
    /// Brute-force comparison, run for at most `ORACLE_MAX_FLOWS` flows.
    pub oracle: Option<OracleReport>,
}

pub const ORACLE_MAX_FLOWS: usize = 3;

/// Fluid dual descent on the active flows, checked against the grid oracle
/// when the instance is small enough.
pub fn cmd_solve(sc: &Scenario, active: ActiveSet, grid_step: f64) -> Result<SolveReport> {
    if active.is_empty() {
        bail!("no active flows to solve for");
    }
    let p = problem(sc, active);
    let res = dual_descent_solve(&p, &sc.step_sizes(), sc.params.solver_max_iters, sc.params.solver_rate_tol_bps)?;
    let ids: Vec<FlowId> = p.active.iter().collect();
    let objective = p.objective(&res.rates);
    let dual_objective = dual_value(&res.prices, &p).ok();
    let oracle = if ids.len() <= ORACLE_MAX_FLOWS {
        let o = brute_force_primal(&p, grid_step)?;
        Some(OracleReport {
            grid_step_bps: grid_step,
            rates_bps: ids.iter().map(|s| o.rates[s.0]).collect(),
            objective: o.objective,
            max_rate_diff_bps: ids.iter().map(|s| (o.rates[s.0] - res.rates[s.0]).abs()).fold(0.0, f64::max),
        })
    } else {
        None
    };
    Ok(SolveReport {
        bound_variant: p.variant,
        active_flows: ids.iter().map(|s| s.0).collect(),
        rates_bps: ids.iter().map(|s| res.rates[s.0]).collect(),
        bounds_s: ids.iter().map(|&s| bound_or_none(&p, s, &res.rates, p.variant)).collect(),
        edge_prices: res.prices.edge.clone(),
        source_prices: ids.iter().map(|s| res.prices.source[s.0]).collect(),
        iterations: res.iterations,
        converged: res.converged,
        objective,
        dual_objective,
        duality_gap: dual_objective.map(|d| d - objective),
        oracle,
    })
}

// ---------------------------------------------------------------- bounds

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub flow: usize,
    pub rate_bps: f64,
    pub delay_target_s: f64,
    /// Null where the bound is undefined (no residual capacity).
    pub overestimate_s: Option<f64>,
    pub single_term_s: Option<f64>,
    pub tight_s: Option<f64>,
    pub packetized_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    /// "override" when rates came from the command line, else "solver".
    pub rates_from: String,
    pub rows: Vec<BoundRow>,
}

/// All four bound variants per active flow at the given rates, or at the
/// fluid optimum when none are given.
pub fn cmd_bounds(sc: &Scenario, active: ActiveSet, rates: Option<Vec<f64>>) -> Result<BoundsReport> {
    if active.is_empty() {
        bail!("no active flows");
    }
    let p = problem(sc, active);
    let (rates, rates_from) = match rates {
        Some(r) => (r, "override"),
        None => {
            let res =
                dual_descent_solve(&p, &sc.step_sizes(), sc.params.solver_max_iters, sc.params.solver_rate_tol_bps)?;
            (res.rates, "solver")
        }
    };
    let rows = p
        .active
        .iter()
        .map(|s| BoundRow {
            flow: s.0,
            rate_bps: rates[s.0],
            delay_target_s: p.flows[s.0].delay_target,
            overestimate_s: bound_or_none(&p, s, &rates, BoundVariant::Overestimate),
            single_term_s: bound_or_none(&p, s, &rates, BoundVariant::SingleTerm),
            tight_s: bound_or_none(&p, s, &rates, BoundVariant::Tight),
            packetized_s: bound_or_none(&p, s, &rates, BoundVariant::Packetized),
        })
        .collect();
    Ok(BoundsReport { rates_from: rates_from.into(), rows })
}

// ---------------------------------------------------------------- fairness

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub rates_bps: Vec<f64>,
    pub bounds_s: Vec<Option<f64>>,
    pub verdicts: Vec<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FairnessReport {
    pub bound_variant: BoundVariant,
    pub active_flows: Vec<usize>,
    pub delay_targets_s: Vec<f64>,
    pub equal_split: Allocation,
    pub solver: Allocation,
}

fn allocation(p: &FluidProblem, rates: &[f64]) -> Allocation {
    let ids: Vec<FlowId> = p.active.iter().collect();
    let bounds: Vec<Option<f64>> = ids.iter().map(|&s| bound_or_none(p, s, rates, p.variant)).collect();
    let verdicts = ids
        .iter()
        .zip(&bounds)
        .map(|(s, b)| match b {
            Some(b) if *b <= p.flows[s.0].delay_target * (1.0 + VERDICT_TOL) => Verdict::Satisfied,
            _ => Verdict::Violated,
        })
        .collect();
    Allocation { rates_bps: ids.iter().map(|s| rates[s.0]).collect(), bounds_s: bounds, verdicts }
}

/// Each flow's smallest per-link equal share c_e / |S(e)| along its path,
/// clamped to its rate limits.
pub fn equal_split(p: &FluidProblem) -> Vec<f64> {
    let mut rates = vec![0.0; p.flows.len()];
    for s in p.active.iter() {
        let flow = &p.flows[s.0];
        let share = flow
            .path
            .iter()
            .map(|&e| {
                let n = sources_on_edge(&p.net, &p.flows, &p.active, e).map(|v| v.len()).unwrap_or(1);
                p.net.capacity(e) / n.max(1) as f64
            })
            .fold(f64::INFINITY, f64::min);
        rates[s.0] = flow.clamp_rate(share);
    }
    rates
}

/// Equal split versus the solver's allocation, judged by the scenario's
/// bound variant against each flow's delay target.
pub fn cmd_compare_fairness(sc: &Scenario, active: ActiveSet) -> Result<FairnessReport> {
    if active.is_empty() {
        bail!("no active flows");
    }
    let p = problem(sc, active);
    let res = dual_descent_solve(&p, &sc.step_sizes(), sc.params.solver_max_iters, sc.params.solver_rate_tol_bps)?;
    Ok(FairnessReport {
        bound_variant: p.variant,
        active_flows: p.active.iter().map(|s| s.0).collect(),
        delay_targets_s: p.active.iter().map(|s| p.flows[s.0].delay_target).collect(),
        equal_split: allocation(&p, &equal_split(&p)),
        solver: allocation(&p, &res.rates),
    })
}

// ---------------------------------------------------------------- twin

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransientView {
    pub overshoot_s: f64,
    pub unbounded_ticks: usize,
    pub settling_s: Option<f64>,
}

impl From<&JoinTransient> for TransientView {
    fn from(t: &JoinTransient) -> Self {
        Self { overshoot_s: t.overshoot_s, unbounded_ticks: t.unbounded_ticks, settling_s: t.settling_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JoinComparison {
    pub flow: usize,
    pub join_s: f64,
    pub window_end_s: f64,
    pub reactive: TransientView,
    pub proactive: TransientView,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwinReport {
    pub seed: u64,
    pub joins: Vec<JoinComparison>,
}

pub const TRANSIENTS_JSON: &str = "transients.json";

/// Runs the scenario reactively and proactively on the same seed. Writes
/// each run's files under `reactive/` and `proactive/` plus a per-join
/// comparison in `transients.json`.
pub fn cmd_twin(sc: &Scenario, out: &Path) -> Result<TwinReport> {
    let mut summaries = Vec::new();
    for mode in [Mode::Reactive, Mode::Proactive] {
        let mut run = sc.clone();
        run.params.mode = mode;
        summaries.push(cmd_simulate(&run, &out.join(mode.to_string()), false)?);
    }
    let joins = summaries[0]
        .transients
        .iter()
        .zip(&summaries[1].transients)
        .map(|(r, p)| JoinComparison {
            flow: r.flow,
            join_s: r.join_s,
            window_end_s: r.window_end_s,
            reactive: r.into(),
            proactive: p.into(),
        })
        .collect();
    let report = TwinReport { seed: sc.params.seed, joins };
    write_json(&out.join(TRANSIENTS_JSON), &report)?;
    Ok(report)
}
