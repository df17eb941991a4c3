//! Random exponential marking: per-edge mark probabilities whose end-to-end
//! composition encodes a flow's total price, and recovery of that price from
//! observed mark fractions.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numopt::PriceVector;
use crate::topology::{ActiveSet, EdgeId, FlowId, FlowSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RemError {
    #[error("edge {edge} is not on the path of flow {flow}")]
    EdgeNotOnPath { flow: FlowId, edge: EdgeId },
}

/// 1 - exp(-(p_{-s}/|E(s)| + p_e)) from its scalar parts.
pub fn edge_mark_probability(others_source_price: f64, path_len: usize, edge_price: f64) -> f64 {
    -(-(others_source_price / path_len as f64 + edge_price)).exp_m1()
}

/// Mark probability applied to `flow`'s packets at `edge`.
pub fn marking_probability(
    flow: &FlowSpec,
    edge: EdgeId,
    prices: &PriceVector,
    active: &ActiveSet,
) -> Result<f64, RemError> {
    if !flow.uses(edge) {
        return Err(RemError::EdgeNotOnPath { flow: flow.id, edge });
    }
    Ok(edge_mark_probability(prices.others_source_price(flow.id, active), flow.path.len(), prices.edge[edge.0]))
}

/// 1 - exp(-(p_{-s} + p^s)): probability a packet arrives marked when every
/// hop samples independently.
pub fn end_to_end_mark_prob(flow: &FlowSpec, prices: &PriceVector, active: &ActiveSet) -> f64 {
    -(-prices.total(flow, active)).exp_m1()
}

/// -ln(1 - P_M) with P_M = marked/total capped at 1 - 1/(total+1).
/// An empty sample carries no information and returns `last_estimate`.
pub fn estimate_price_sum(marked: u64, total: u64, last_estimate: f64) -> f64 {
    if total == 0 {
        return last_estimate;
    }
    debug_assert!(marked <= total);
    let cap = 1.0 - 1.0 / (total as f64 + 1.0);
    let pm = (marked as f64 / total as f64).min(cap);
    -(-pm).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Counts from the most recent `window_ticks` update intervals.
    #[default]
    Windowed,
    /// Counts since the flow started.
    Cumulative,
}

impl fmt::Display for EstimatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorMode::Windowed => "windowed",
            EstimatorMode::Cumulative => "cumulative",
        })
    }
}

impl FromStr for EstimatorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "windowed" => Ok(EstimatorMode::Windowed),
            "cumulative" => Ok(EstimatorMode::Cumulative),
            other => Err(format!("unknown estimator mode {other:?} (expected windowed or cumulative)")),
        }
    }
}

/// Per-host ECN echo counter. Feedback accrues into the open interval;
/// `close_interval` folds it into the window and yields a price estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkEstimator {
    mode: EstimatorMode,
    window_ticks: usize,
    history: VecDeque<(u64, u64)>,
    pub window_marked: u64,
    pub window_total: u64,
    cumulative: (u64, u64),
    last_estimate: f64,
}

impl MarkEstimator {
    pub fn new(mode: EstimatorMode, window_ticks: usize) -> Self {
        Self {
            mode,
            window_ticks: window_ticks.max(1),
            history: VecDeque::new(),
            window_marked: 0,
            window_total: 0,
            cumulative: (0, 0),
            last_estimate: 0.0,
        }
    }

    pub fn record(&mut self, marked: bool) {
        self.window_total += 1;
        self.window_marked += u64::from(marked);
    }

    pub fn last_estimate(&self) -> f64 {
        self.last_estimate
    }

    /// Marked and total counts the next estimate would use, open interval included.
    pub fn counts(&self) -> (u64, u64) {
        match self.mode {
            EstimatorMode::Cumulative => {
                (self.cumulative.0 + self.window_marked, self.cumulative.1 + self.window_total)
            }
            EstimatorMode::Windowed => {
                self.history.iter().fold((self.window_marked, self.window_total), |(m, t), &(hm, ht)| (m + hm, t + ht))
            }
        }
    }

    pub fn close_interval(&mut self) -> f64 {
        let (marked, total) = self.counts();
        self.last_estimate = estimate_price_sum(marked, total, self.last_estimate);
        match self.mode {
            EstimatorMode::Cumulative => {
                self.cumulative = (marked, total);
            }
            EstimatorMode::Windowed => {
                if self.window_ticks > 1 {
                    self.history.push_back((self.window_marked, self.window_total));
                }
                while self.history.len() >= self.window_ticks {
                    self.history.pop_front();
                }
            }
        }
        self.window_marked = 0;
        self.window_total = 0;
        self.last_estimate
    }

    /// Replaces all retained history with a synthetic sample spanning the
    /// window's closed intervals and sets the estimate it implies. Counts are
    /// spread evenly over those intervals so they age out one at a time.
    pub fn seed(&mut self, marked: u64, total: u64) {
        self.history.clear();
        self.window_marked = 0;
        self.window_total = 0;
        self.cumulative = (0, 0);
        match self.mode {
            EstimatorMode::Cumulative => self.cumulative = (marked, total),
            EstimatorMode::Windowed if self.window_ticks > 1 => {
                let slots = (self.window_ticks - 1) as u64;
                for i in 0..slots {
                    let share = |n: u64| n / slots + u64::from(i < n % slots);
                    self.history.push_back((share(marked), share(total)));
                }
            }
            EstimatorMode::Windowed => {}
        }
        self.last_estimate = estimate_price_sum(marked, total, self.last_estimate);
    }
}
