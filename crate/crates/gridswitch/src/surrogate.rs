//! Scoring and stochastic relaxation of switching decisions.
//!
//! The solver's decision head produces one closing logit per switch.
//! Logits induce a factored Bernoulli distribution over decisions:
//! switch e is closed with probability sigma(z_e), independently. This
//! module turns that distribution into trainable quantities: the exact
//! annealed objective (a KL divergence to the Boltzmann measure of the
//! LP score, tractable only for small switch counts), its gradient, and
//! three sampled estimators of the same gradient. It also owns the
//! sampling policies used to draw candidate decisions, the per-context
//! LP evaluation cache that prices those candidates, and the memory
//! table that keeps the best feasible decision seen per context.
//!
//! Scores are LP objectives in MW, lower is better. No normalization is
//! applied anywhere in this module; estimators see raw megawatts.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{bus_partition, Decision, Grid};
use crate::lp::{exchange_capacity, ExchangeError};

/// Schema tag for persisted memory tables.
pub const MEMORY_SCHEMA: &str = "memory-v1";

/// Exact objective and gradient enumerate all 2^n decisions; past this
/// many switches they refuse rather than grind.
pub const EXACT_ENUMERATION_LIMIT: usize = 16;

/// Consecutive rejected draws before sampling gives up. Any healthy
/// policy accepts within a handful of tries; hitting this limit means
/// the requested combination cannot produce an effective action at all.
const REJECTION_LIMIT: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum SurrogateError {
    #[error("expected {expected} switch entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("exact enumeration over {0} switches exceeds the {EXACT_ENUMERATION_LIMIT}-switch limit")]
    TooManySwitches(usize),
    #[error("the all-closed decision is infeasible, so no penalty reference exists")]
    AllClosedInfeasible,
    #[error("{REJECTION_LIMIT} consecutive draws at {place} were rejected as no-ops")]
    RejectionStalled { place: String },
    #[error("no stored decision for context {0} and no candidates to seed one")]
    NoCandidates(String),
    #[error("sampling policy is inconsistent: {0}")]
    BadPolicy(String),
    #[error("filter temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("no samples to estimate from")]
    NoSamples,
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error("memory file declares schema {0:?}, expected {MEMORY_SCHEMA:?}")]
    Schema(String),
}

/// Logistic function, stable on both tails.
pub fn sigma(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflowing for large positive x.
pub fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), SurrogateError> {
    if expected == got {
        Ok(())
    } else {
        Err(SurrogateError::LengthMismatch { expected, got })
    }
}

/// Log-probability of a decision under the closing logits z: each
/// switch is closed with probability sigma(z_e) independently, so the
/// log-mass is sum(y_e z_e - log(1 + e^{z_e})).
pub fn rho_log_prob(z: &[f64], decision: &Decision) -> Result<f64, SurrogateError> {
    check_len(z.len(), decision.len())?;
    Ok(z.iter()
        .zip(&decision.states)
        .map(|(&z_e, &y_e)| f64::from(y_e) * z_e - log1p_exp(z_e))
        .sum())
}

/// Mode of the factored distribution: close exactly the switches with
/// nonnegative logit. A logit of zero is a tie and goes to closed.
pub fn most_probable_decision(z: &[f64]) -> Decision {
    Decision {
        states: z.iter().map(|&v| u8::from(v >= 0.0)).collect(),
    }
}

/// Switch index range of each substation in canonical order. Grids sort
/// switches by substation, so every substation is one contiguous run.
fn substation_runs(grid: &Grid) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for e in 1..=grid.switches.len() {
        if e == grid.switches.len()
            || grid.switches[e].substation != grid.switches[start].substation
        {
            runs.push((start, e));
            start = e;
        }
    }
    runs
}

/// Whether the states change the substation's internal topology: the
/// components of its addresses under the closed local switches differ
/// from the components with every local switch closed. Both unions keep
/// the class minimum as root, so equal root maps mean equal partitions.
fn changes_substation(grid: &Grid, lo: usize, hi: usize, states: &[u8]) -> bool {
    let mut addrs: Vec<usize> = Vec::with_capacity(2 * (hi - lo));
    for sw in &grid.switches[lo..hi] {
        addrs.push(sw.from);
        addrs.push(sw.to);
    }
    addrs.sort_unstable();
    addrs.dedup();
    fn root(comp: &mut [usize], mut a: usize) -> usize {
        while comp[a] != a {
            comp[a] = comp[comp[a]];
            a = comp[a];
        }
        a
    }
    let mut all: Vec<usize> = (0..addrs.len()).collect();
    let mut cur = all.clone();
    for (e, sw) in grid.switches[lo..hi].iter().enumerate() {
        let f = addrs.binary_search(&sw.from).expect("endpoint is local");
        let t = addrs.binary_search(&sw.to).expect("endpoint is local");
        let (ra, rb) = (root(&mut all, f), root(&mut all, t));
        all[ra.max(rb)] = ra.min(rb);
        if states[lo + e] == 1 {
            let (ra, rb) = (root(&mut cur, f), root(&mut cur, t));
            cur[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..addrs.len()).any(|i| root(&mut all, i) != root(&mut cur, i))
}

/// True when the decision leaves the electrical topology identical to
/// keeping every switch closed. Checked substation by substation:
/// substations occupy disjoint address blocks, so local equivalence
/// everywhere is the same as global partition equality (asserted in
/// debug builds). Panics on a length mismatch, like `bus_partition`.
pub fn is_noop_equivalent(grid: &Grid, decision: &Decision) -> bool {
    assert_eq!(
        decision.len(),
        grid.n_switches(),
        "decision length {} does not match switch count {}",
        decision.len(),
        grid.n_switches()
    );
    let noop = substation_runs(grid)
        .iter()
        .all(|&(lo, hi)| !changes_substation(grid, lo, hi, &decision.states));
    debug_assert_eq!(
        noop,
        bus_partition(grid, decision)
            == bus_partition(grid, &Decision::all_closed(grid.n_switches())),
        "local no-op check disagrees with the global partition"
    );
    noop
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// Every switch drawn independently, closed with probability
    /// sigma(z_e).
    IndependentBernoulli,
    /// The most probable decision, with a few extra switches opened on
    /// top of it.
    PerturbAroundMode,
}

/// How candidate decisions are drawn from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingPolicy {
    pub mode: SamplingMode,
    /// Redraw candidates that amount to doing nothing. Independent
    /// draws are redrawn one substation at a time until each substation
    /// takes an effective action; perturbations are redrawn until the
    /// topology differs from the unperturbed mode. The unperturbed
    /// share of `PerturbAroundMode` always passes through unchanged.
    pub reject_noop: bool,
    /// Probability of opening one extra switch in `PerturbAroundMode`.
    pub p_one_extra: f64,
    /// Probability of opening two extra switches in `PerturbAroundMode`.
    pub p_two_extra: f64,
}

impl SamplingPolicy {
    /// Exploration default: perturb the mode, opening one extra switch
    /// 30% of the time and two 40% of the time, never a no-op.
    pub fn exploration() -> Self {
        SamplingPolicy {
            mode: SamplingMode::PerturbAroundMode,
            reject_noop: true,
            p_one_extra: 0.3,
            p_two_extra: 0.4,
        }
    }

    /// Plain factored sampling, used by the Monte Carlo estimators.
    pub fn independent(reject_noop: bool) -> Self {
        SamplingPolicy {
            mode: SamplingMode::IndependentBernoulli,
            reject_noop,
            p_one_extra: 0.3,
            p_two_extra: 0.4,
        }
    }

    fn check(&self) -> Result<(), SurrogateError> {
        let (p1, p2) = (self.p_one_extra, self.p_two_extra);
        if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) || p1 + p2 > 1.0 {
            return Err(SurrogateError::BadPolicy(format!(
                "perturbation probabilities {p1} and {p2} must be nonnegative and sum to at most 1"
            )));
        }
        Ok(())
    }
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        SamplingPolicy::exploration()
    }
}

/// Draw n candidate decisions from the logits under the given policy.
pub fn sample_decisions<R: Rng>(
    z: &[f64],
    grid: &Grid,
    n: usize,
    policy: SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<Decision>, SurrogateError> {
    policy.check()?;
    check_len(grid.n_switches(), z.len())?;
    match policy.mode {
        SamplingMode::IndependentBernoulli => sample_bernoulli(z, grid, n, policy, rng),
        SamplingMode::PerturbAroundMode => sample_perturbed(z, grid, n, policy, rng),
    }
}

fn sample_bernoulli<R: Rng>(
    z: &[f64],
    grid: &Grid,
    n: usize,
    policy: SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<Decision>, SurrogateError> {
    let runs = substation_runs(grid);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut states = vec![1u8; z.len()];
        for &(lo, hi) in &runs {
            let mut tries = 0;
            loop {
                for e in lo..hi {
                    states[e] = u8::from(rng.gen::<f64>() < sigma(z[e]));
                }
                if !policy.reject_noop || changes_substation(grid, lo, hi, &states) {
                    break;
                }
                tries += 1;
                if tries == REJECTION_LIMIT {
                    return Err(SurrogateError::RejectionStalled {
                        place: format!("substation {}", grid.switches[lo].substation),
                    });
                }
            }
        }
        out.push(Decision { states });
    }
    Ok(out)
}

fn sample_perturbed<R: Rng>(
    z: &[f64],
    grid: &Grid,
    n: usize,
    policy: SamplingPolicy,
    rng: &mut R,
) -> Result<Vec<Decision>, SurrogateError> {
    let mode = most_probable_decision(z);
    let mode_partition = bus_partition(grid, &mode);
    let closed: Vec<usize> = (0..mode.len()).filter(|&e| mode.is_closed(e)).collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut extra = if u < policy.p_one_extra {
            1
        } else if u < policy.p_one_extra + policy.p_two_extra {
            2
        } else {
            0
        };
        extra = extra.min(closed.len());
        if extra == 0 {
            out.push(mode.clone());
            continue;
        }
        let mut tries = 0;
        loop {
            let mut d = mode.clone();
            let i = rng.gen_range(0..closed.len());
            d.states[closed[i]] = 0;
            if extra == 2 {
                let j = (i + 1 + rng.gen_range(0..closed.len() - 1)) % closed.len();
                d.states[closed[j]] = 0;
            }
            if !policy.reject_noop || bus_partition(grid, &d) != mode_partition {
                out.push(d);
                break;
            }
            tries += 1;
            if tries == REJECTION_LIMIT {
                return Err(SurrogateError::RejectionStalled {
                    place: "the mode perturbation".to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Caching LP evaluator for one context.
///
/// Every decision is priced by its LP objective in MW. Decisions
/// without a balanced operating point get the all-closed objective plus
/// the total nominal generation, an offset large enough that no
/// feasible decision can score worse. Results are memoized per
/// decision, so estimators may resample freely.
#[derive(Debug)]
pub struct ContextEval<'a> {
    grid: &'a Grid,
    all_closed_mw: f64,
    memo: HashMap<Decision, Option<f64>>,
    solves: usize,
}

impl<'a> ContextEval<'a> {
    /// Errors with `AllClosedInfeasible` when the context cannot even
    /// operate with every switch closed; such contexts carry no penalty
    /// reference and are excluded from training.
    pub fn new(grid: &'a Grid) -> Result<Self, SurrogateError> {
        let all = Decision::all_closed(grid.n_switches());
        let Some(objective) = exchange_capacity(grid, &all)?.objective_mw() else {
            return Err(SurrogateError::AllClosedInfeasible);
        };
        let mut memo = HashMap::new();
        memo.insert(all, Some(objective));
        Ok(ContextEval {
            grid,
            all_closed_mw: objective,
            memo,
            solves: 1,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.grid
    }

    /// LP objective of the all-closed decision.
    pub fn all_closed_mw(&self) -> f64 {
        self.all_closed_mw
    }

    /// Score assigned to infeasible decisions.
    pub fn penalty_mw(&self) -> f64 {
        self.all_closed_mw + self.grid.total_generation_mw()
    }

    /// LP solves so far; memo hits do not count.
    pub fn solves(&self) -> usize {
        self.solves
    }

    /// LP objective of a decision, or None when it is infeasible.
    pub fn feasible_objective(
        &mut self,
        decision: &Decision,
    ) -> Result<Option<f64>, SurrogateError> {
        if let Some(&cached) = self.memo.get(decision) {
            return Ok(cached);
        }
        let objective = exchange_capacity(self.grid, decision)?.objective_mw();
        self.solves += 1;
        self.memo.insert(decision.clone(), objective);
        Ok(objective)
    }

    /// Training score of a decision: the LP objective, penalty-mapped
    /// when infeasible. Lower is better.
    pub fn score(&mut self, decision: &Decision) -> Result<f64, SurrogateError> {
        let objective = self.feasible_objective(decision)?;
        Ok(objective.unwrap_or(self.penalty_mw()))
    }

    /// Score a batch of sampled decisions for the estimators.
    pub fn score_all(
        &mut self,
        decisions: &[Decision],
    ) -> Result<Vec<(Decision, f64)>, SurrogateError> {
        decisions
            .iter()
            .map(|d| Ok((d.clone(), self.score(d)?)))
            .collect()
    }
}

fn decision_from_mask(n: usize, mask: u32) -> Decision {
    Decision {
        states: (0..n).map(|e| ((mask >> e) & 1) as u8).collect(),
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Entropy of the factored distribution, in nats. Peaks at n·ln(2) for
/// all-zero logits and falls toward zero as they saturate.
pub fn entropy(z: &[f64]) -> f64 {
    z.iter().map(|&v| log1p_exp(v) - v * sigma(v)).sum()
}

fn guard_enumeration(z: &[f64], eval: &ContextEval) -> Result<usize, SurrogateError> {
    let n = eval.grid().n_switches();
    check_len(n, z.len())?;
    if n > EXACT_ENUMERATION_LIMIT {
        return Err(SurrogateError::TooManySwitches(n));
    }
    Ok(n)
}

/// Exact annealed objective by full enumeration: the KL divergence from
/// the factored distribution to the Boltzmann measure of the score at
/// inverse temperature beta, written as negated entropy plus beta times
/// the expected score plus the log partition function. Tractable only
/// for small switch counts; its role is to anchor the sampled
/// estimators and the finite-difference checks.
pub fn exact_objective(
    z: &[f64],
    eval: &mut ContextEval,
    beta: f64,
) -> Result<f64, SurrogateError> {
    let n = guard_enumeration(z, eval)?;
    let entropy = entropy(z);
    let mut expected = 0.0;
    let mut neg_beta_f = Vec::with_capacity(1usize << n);
    for mask in 0..(1u32 << n) {
        let d = decision_from_mask(n, mask);
        let f = eval.score(&d)?;
        expected += rho_log_prob(z, &d)?.exp() * f;
        neg_beta_f.push(-beta * f);
    }
    Ok(-entropy + beta * expected + log_sum_exp(&neg_beta_f))
}

/// Gradient of `exact_objective` in the logits. The log partition term
/// does not depend on z, so the gradient is the entropy term plus a
/// score-weighted expectation of the logit residual y - sigma(z).
pub fn exact_gradient(
    z: &[f64],
    eval: &mut ContextEval,
    beta: f64,
) -> Result<Vec<f64>, SurrogateError> {
    let n = guard_enumeration(z, eval)?;
    let sig: Vec<f64> = z.iter().map(|&v| sigma(v)).collect();
    let mut grad: Vec<f64> = z
        .iter()
        .zip(&sig)
        .map(|(&z_e, &s)| z_e * s * (1.0 - s))
        .collect();
    for mask in 0..(1u32 << n) {
        let d = decision_from_mask(n, mask);
        let f = eval.score(&d)?;
        let p = rho_log_prob(z, &d)?.exp();
        for e in 0..n {
            grad[e] += beta * p * f * (f64::from(d.states[e]) - sig[e]);
        }
    }
    Ok(grad)
}

fn score_weighted_gradient(
    z: &[f64],
    samples: &[(Decision, f64)],
    scores: &[f64],
    beta: f64,
) -> Result<Vec<f64>, SurrogateError> {
    if samples.is_empty() {
        return Err(SurrogateError::NoSamples);
    }
    for (d, _) in samples {
        check_len(z.len(), d.len())?;
    }
    let sig: Vec<f64> = z.iter().map(|&v| sigma(v)).collect();
    let mut grad: Vec<f64> = z
        .iter()
        .zip(&sig)
        .map(|(&z_e, &s)| z_e * s * (1.0 - s))
        .collect();
    let scale = beta / samples.len() as f64;
    for ((d, _), &f) in samples.iter().zip(scores) {
        for e in 0..z.len() {
            grad[e] += scale * f * (f64::from(d.states[e]) - sig[e]);
        }
    }
    Ok(grad)
}

/// Monte Carlo estimator of the annealed objective gradient from scored
/// samples: the entropy term plus the empirical mean of
/// beta * f * (y - sigma(z)). Unbiased when the samples are drawn
/// independently from the factored distribution.
pub fn grad_mc(
    z: &[f64],
    samples: &[(Decision, f64)],
    beta: f64,
) -> Result<Vec<f64>, SurrogateError> {
    let scores: Vec<f64> = samples.iter().map(|&(_, f)| f).collect();
    score_weighted_gradient(z, samples, &scores, beta)
}

/// Squash raw scores for the filtered estimator: the batch minimum maps
/// to exactly -1/2, scores tau above it to about -4.5e-5, and the whole
/// range lands in [-1/2, 0). Ranking survives, magnitudes do not, which
/// keeps the gradient scale independent of the spread in megawatts.
pub fn filter_scores(scores: &[f64], tau: f64) -> Result<Vec<f64>, SurrogateError> {
    if tau <= 0.0 {
        return Err(SurrogateError::NonPositiveTemperature(tau));
    }
    if scores.is_empty() {
        return Err(SurrogateError::NoSamples);
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(scores
        .iter()
        .map(|&f| -sigma(-(f - min) / tau))
        .collect())
}

/// Filtered Monte Carlo estimator: `grad_mc` with the raw scores passed
/// through `filter_scores` first, so only near-best samples pull the
/// logits and they pull with bounded weight.
pub fn grad_fmc(
    z: &[f64],
    samples: &[(Decision, f64)],
    beta: f64,
    tau: f64,
) -> Result<Vec<f64>, SurrogateError> {
    let raw: Vec<f64> = samples.iter().map(|&(_, f)| f).collect();
    let filtered = filter_scores(&raw, tau)?;
    score_weighted_gradient(z, samples, &filtered, beta)
}

/// Memory-target estimator: pulls the logits toward reproducing the
/// remembered decision y. Algebraically sigma(z)sigma(-z)(z - beta(2y-1)),
/// with a fixed point at z = beta(2y - 1).
pub fn grad_mt(z: &[f64], y_mem: &Decision, beta: f64) -> Result<Vec<f64>, SurrogateError> {
    check_len(z.len(), y_mem.len())?;
    Ok(z.iter()
        .zip(&y_mem.states)
        .map(|(&z_e, &y_e)| {
            let s = sigma(z_e);
            s * (1.0 - s) * (z_e - beta * (2.0 * f64::from(y_e) - 1.0))
        })
        .collect())
}

/// Best feasible decision seen per context, keyed by context id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub decision: Decision,
    pub score_mw: f64,
}

/// The table only ever improves: a candidate replaces the incumbent
/// when its score is strictly lower, so a remembered decision never
/// gets worse across training restarts. Callers are expected to pass
/// feasible candidates only; the table itself does not re-solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryTable {
    entries: BTreeMap<String, MemoryEntry>,
}

impl MemoryTable {
    pub fn new() -> Self {
        MemoryTable::default()
    }

    pub fn get(&self, context_id: &str) -> Option<&MemoryEntry> {
        self.entries.get(context_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MemoryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Insert an incumbent for a context that has none yet. Training
    /// seeds every context with the all-closed decision this way before
    /// any candidate updates run.
    pub fn seed(&mut self, context_id: &str, decision: Decision, score_mw: f64) {
        self.entries
            .entry(context_id.to_string())
            .or_insert(MemoryEntry {
                decision,
                score_mw,
            });
    }

    /// Fold scored feasible candidates into the table. Returns whether
    /// the stored entry improved; ties keep the incumbent. A context
    /// without an entry adopts the best candidate, and calling with
    /// neither an entry nor candidates is an error.
    pub fn update(
        &mut self,
        context_id: &str,
        candidates: &[(Decision, f64)],
    ) -> Result<bool, SurrogateError> {
        let best = candidates
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match (self.entries.get_mut(context_id), best) {
            (None, None) => Err(SurrogateError::NoCandidates(context_id.to_string())),
            (None, Some((decision, score))) => {
                self.entries.insert(
                    context_id.to_string(),
                    MemoryEntry {
                        decision: decision.clone(),
                        score_mw: *score,
                    },
                );
                Ok(true)
            }
            (Some(_), None) => Ok(false),
            (Some(entry), Some((decision, score))) => {
                if *score < entry.score_mw {
                    entry.decision = decision.clone();
                    entry.score_mw = *score;
                    Ok(true)
                } else {
                    Ok(false)
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            contexts: &'a BTreeMap<String, MemoryEntry>,
        }
        serde_json::to_string_pretty(&Doc {
            schema: MEMORY_SCHEMA,
            contexts: &self.entries,
        })
        .expect("memory serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<MemoryTable, SurrogateError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            contexts: BTreeMap<String, MemoryEntry>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != MEMORY_SCHEMA {
            return Err(SurrogateError::Schema(doc.schema));
        }
        Ok(MemoryTable {
            entries: doc.contexts,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MemoryTable, SurrogateError> {
        MemoryTable::from_json(&fs::read_to_string(path)?)
    }
}
