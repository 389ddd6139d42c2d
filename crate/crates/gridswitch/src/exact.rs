//! Reference solvers over the discrete decision space.
//!
//! Two routes to the best switching decision, both exact up to their
//! stopping rules: plain enumeration for small grids, and LP-based
//! branch-and-bound with an opening budget for everything else. They are
//! deliberately independent of the learned policy so that evaluation has
//! a trustworthy yardstick.
//!
//! Enumeration walks decision vectors in lexicographic order with
//! all-closed first (treating closed as the smaller symbol), skipping
//! decisions whose bus partition it has already scored: decisions that
//! induce the same partition describe the same electrical topology.
//! Branch-and-bound relaxes unassigned switches to y in [0, 1] inside the
//! big-M rows, explores best-bound-first, and prunes against the
//! incumbent with a relative gap.

use crate::grid::{bus_partition, Decision, Grid};
use crate::lp::{
    build_relaxed_lp, exchange_capacity, solve, Exchange, ExchangeError, LpResult, SwitchState,
};
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

/// Enumeration is cut off beyond this many switches; above it the search
/// space is out of reach for a reference sweep and branch-and-bound is
/// the intended tool.
pub const ENUMERATION_LIMIT: usize = 24;

#[derive(Debug, thiserror::Error)]
pub enum ExactError {
    #[error("{0} switches exceed the enumeration limit of {ENUMERATION_LIMIT}")]
    TooManySwitches(usize),
    #[error("every decision within the opening budget is infeasible")]
    AllInfeasible,
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
}

/// Result of an exhaustive sweep.
#[derive(Debug, Clone)]
pub struct ExhaustiveReport {
    pub decision: Decision,
    pub capacity_mw: f64,
    /// Decisions actually scored with an LP solve.
    pub evaluated: usize,
    /// Decisions skipped because their partition was already scored.
    pub skipped_equivalent: usize,
}

/// Scores every decision with at most `max_openings` open switches and
/// returns the best feasible one. Ties keep the lexicographically first
/// decision, all-closed first.
pub fn exhaustive_best(grid: &Grid, max_openings: usize) -> Result<ExhaustiveReport, ExactError> {
    let n = grid.n_switches();
    if n > ENUMERATION_LIMIT {
        return Err(ExactError::TooManySwitches(n));
    }
    let mut best: Option<(f64, Decision)> = None;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut seen: HashMap<Vec<usize>, ()> = HashMap::new();
    // Counting masks down from all-ones enumerates decision vectors in
    // lexicographic order with closed sorting before open.
    let full: u64 = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let mut mask = full;
    loop {
        let openings = (full ^ mask).count_ones() as usize;
        if openings <= max_openings {
            let states: Vec<u8> = (0..n).map(|e| ((mask >> (n - 1 - e)) & 1) as u8).collect();
            let d = Decision { states };
            let part = bus_partition(grid, &d);
            match seen.entry(part.bus_of) {
                Entry::Occupied(_) => skipped += 1,
                Entry::Vacant(v) => {
                    v.insert(());
                    evaluated += 1;
                    if let Exchange::Feasible(r) = exchange_capacity(grid, &d)? {
                        let better = match &best {
                            None => true,
                            Some((cap, _)) => r.capacity_mw > *cap,
                        };
                        if better {
                            best = Some((r.capacity_mw, d));
                        }
                    }
                }
            }
        }
        if mask == 0 {
            break;
        }
        mask -= 1;
    }
    match best {
        Some((capacity_mw, decision)) => Ok(ExhaustiveReport {
            decision,
            capacity_mw,
            evaluated,
            skipped_equivalent: skipped,
        }),
        None => Err(ExactError::AllInfeasible),
    }
}

/// Branch-and-bound controls. Defaults match the reference solver setup
/// used for full-scale baselines: at most 6 openings, 1% gap, 10 minutes.
#[derive(Debug, Clone)]
pub struct BnbConfig {
    pub max_openings: usize,
    /// Relative optimality gap at which search stops.
    pub gap: f64,
    /// Wall-clock budget in seconds.
    pub time_limit_s: f64,
}

impl Default for BnbConfig {
    fn default() -> Self {
        BnbConfig {
            max_openings: 6,
            gap: 0.01,
            time_limit_s: 600.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnbReport {
    pub decision: Decision,
    pub capacity_mw: f64,
    /// Best upper bound still open when the search stopped.
    pub bound_mw: f64,
    /// (bound - incumbent) / |incumbent| at termination, clamped at 0.
    pub gap_achieved: f64,
    pub nodes_explored: usize,
    pub timed_out: bool,
}

struct Node {
    bound: f64,
    depth: usize,
    seq: usize,
    /// Assigned prefix; switches from `depth` on are free.
    prefix: Vec<u8>,
    openings: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.bound == other.bound && self.depth == other.depth && self.seq == other.seq
    }
}
impl Eq for Node {}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap on bound, deeper first on ties, then insertion order
        // for full determinism.
        self.bound
            .partial_cmp(&other.bound)
            .unwrap()
            .then(self.depth.cmp(&other.depth))
            .then(other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn relaxation_bound(
    grid: &Grid,
    prefix: &[u8],
    depth: usize,
    max_openings: usize,
) -> Result<Option<f64>, ExactError> {
    let n = grid.n_switches();
    let states: Vec<SwitchState> = (0..n)
        .map(|e| {
            if e < depth {
                if prefix[e] == 1 {
                    SwitchState::Closed
                } else {
                    SwitchState::Open
                }
            } else {
                SwitchState::Free
            }
        })
        .collect();
    let ex = build_relaxed_lp(grid, &states, Some(max_openings))?;
    match solve(&ex.problem).map_err(ExchangeError::from)? {
        LpResult::Optimal { objective, .. } => Ok(Some(-objective)),
        LpResult::Infeasible => Ok(None),
        LpResult::Unbounded => Err(ExactError::Exchange(ExchangeError::Unbounded)),
    }
}

/// Best-bound-first branch-and-bound over switching decisions.
///
/// The incumbent starts at the all-closed decision. With `gap = 0` and no
/// effective time limit the result matches `exhaustive_best` in capacity.
pub fn branch_and_bound(grid: &Grid, cfg: &BnbConfig) -> Result<BnbReport, ExactError> {
    let n = grid.n_switches();
    let started = Instant::now();
    let all_closed = Decision::all_closed(n);
    let mut incumbent: Option<(f64, Decision)> =
        match exchange_capacity(grid, &all_closed)? {
            Exchange::Feasible(r) => Some((r.capacity_mw, all_closed)),
            Exchange::Infeasible => None,
        };
    let mut nodes_explored = 0usize;
    let mut heap: BinaryHeap<Node> = BinaryHeap::new();
    let mut seq = 0usize;
    let mut timed_out = started.elapsed().as_secs_f64() >= cfg.time_limit_s;
    let mut best_open_bound = f64::NEG_INFINITY;

    let accepts = |inc: &Option<(f64, Decision)>, bound: f64, gap: f64| -> bool {
        match inc {
            None => true,
            Some((cap, _)) => bound > cap + gap * cap.abs() + 1e-9,
        }
    };

    if !timed_out {
        if let Some(bound) = relaxation_bound(grid, &[], 0, cfg.max_openings)? {
            heap.push(Node { bound, depth: 0, seq, prefix: Vec::new(), openings: 0 });
            seq += 1;
        }
    }

    while let Some(node) = heap.pop() {
        if started.elapsed().as_secs_f64() >= cfg.time_limit_s {
            timed_out = true;
            best_open_bound = best_open_bound.max(node.bound);
            for rest in heap.drain() {
                best_open_bound = best_open_bound.max(rest.bound);
            }
            break;
        }
        if !accepts(&incumbent, node.bound, cfg.gap) {
            // Best-bound order means every remaining node is prunable too.
            best_open_bound = best_open_bound.max(node.bound);
            heap.clear();
            break;
        }
        nodes_explored += 1;
        // Openings exhausted: the completion is forced all-closed.
        if node.openings == cfg.max_openings {
            let mut states = node.prefix.clone();
            states.resize(n, 1);
            let d = Decision { states };
            if let Exchange::Feasible(r) = exchange_capacity(grid, &d)? {
                if incumbent.as_ref().is_none_or(|(c, _)| r.capacity_mw > *c) {
                    incumbent = Some((r.capacity_mw, d));
                }
            }
            continue;
        }
        if node.depth == n {
            let d = Decision { states: node.prefix.clone() };
            if let Exchange::Feasible(r) = exchange_capacity(grid, &d)? {
                if incumbent.as_ref().is_none_or(|(c, _)| r.capacity_mw > *c) {
                    incumbent = Some((r.capacity_mw, d));
                }
            }
            continue;
        }
        for state in [1u8, 0u8] {
            if state == 0 && node.openings == cfg.max_openings {
                continue;
            }
            let mut prefix = node.prefix.clone();
            prefix.push(state);
            let openings = node.openings + (state == 0) as usize;
            if let Some(bound) =
                relaxation_bound(grid, &prefix, node.depth + 1, cfg.max_openings)?
            {
                if accepts(&incumbent, bound, cfg.gap) {
                    heap.push(Node { bound, depth: node.depth + 1, seq, prefix, openings });
                    seq += 1;
                }
            }
        }
    }

    let Some((capacity_mw, decision)) = incumbent else {
        return Err(ExactError::AllInfeasible);
    };
    let bound_mw = best_open_bound.max(capacity_mw);
    let gap_achieved = ((bound_mw - capacity_mw) / capacity_mw.abs().max(1e-12)).max(0.0);
    Ok(BnbReport {
        decision,
        capacity_mw,
        bound_mw,
        gap_achieved,
        nodes_explored,
        timed_out,
    })
}
