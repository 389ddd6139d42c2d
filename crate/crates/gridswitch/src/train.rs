//! Self-supervised training: minibatched amortized optimization of the
//! annealed objective, validation-based checkpoint retention, decision
//! policies built on trained checkpoints, and evaluation metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::gnn::{
    adam_step, AdamState, Checkpoint, GnnError, GridInput, H2mgNodeModel, ModelConfig, Tape,
};
use crate::grid::{Decision, EcdfNormalizer, Grid, GridFileError};
use crate::lp::{exchange_capacity, ExchangeError};
use crate::surrogate::{
    entropy, grad_fmc, grad_mc, grad_mt, most_probable_decision, sample_decisions, ContextEval,
    MemoryTable, SamplingPolicy, SurrogateError,
};

/// Knot count for the feature normalizer fitted at the start of a run.
const NORMALIZER_KNOTS: usize = 16;

/// Slack when deciding that the solver reference failed to beat the
/// all-closed baseline; the two capacities come from the same LP
/// pipeline, so anything beyond roundoff is a genuine improvement.
const EXCLUSION_TOL_MW: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("the {0} set has no context with a feasible all-closed topology")]
    EmptyDataset(&'static str),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {what}")]
    Diverged { iteration: usize, what: String },
    #[error("no reference value for context {0}")]
    MissingReference(String),
    #[error("context {0} appears more than once")]
    DuplicateContext(String),
    #[error("decision for context {context_id} has {got} switches, expected {expected}")]
    DecisionLength {
        context_id: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Grid(#[from] GridFileError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

/// Which surrogate gradient drives the updates. Plain Monte Carlo is
/// kept as the reference point the other two improve on; it tends to
/// collapse the policy onto all-closed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Mc,
    Fmc,
    Mt,
}

/// Network size. Full matches the published hyper-parameters; tiny
/// trades capacity for speed and is what the fast tests use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Full,
    Tiny,
}

impl Profile {
    pub fn model_config(self) -> ModelConfig {
        match self {
            Profile::Full => ModelConfig::full(),
            Profile::Tiny => ModelConfig::tiny(),
        }
    }
}

fn default_tau() -> f64 {
    20.0
}

fn default_n_samples() -> usize {
    32
}

fn default_minibatch() -> usize {
    8
}

fn default_validation_period() -> usize {
    1000
}

/// Everything a training run needs, loadable from a TOML file. Unknown
/// keys are rejected so a typo cannot silently fall back to a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub estimator: Estimator,
    pub beta: f64,
    /// Filter temperature, read by the fmc estimator only.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Candidate decisions drawn per context and iteration.
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_minibatch")]
    pub minibatch: usize,
    pub max_iterations: usize,
    #[serde(default = "default_validation_period")]
    pub validation_period: usize,
    pub train_dir: PathBuf,
    pub validation_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub profile: Profile,
    #[serde(default)]
    pub sampling: SamplingPolicy,
}

impl TrainConfig {
    /// Filtered Monte Carlo setup: beta 0.1, tau 20, 32 samples,
    /// minibatches of 8, meant for the larger train set.
    pub fn fmc(train_dir: impl Into<PathBuf>, validation_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            estimator: Estimator::Fmc,
            beta: 0.1,
            tau: 20.0,
            n_samples: 32,
            minibatch: 8,
            max_iterations: 150_000,
            validation_period: 1000,
            train_dir: train_dir.into(),
            validation_dir: validation_dir.into(),
            seed: 0,
            profile: Profile::Full,
            sampling: SamplingPolicy::exploration(),
        }
    }

    /// Memory-table setup: beta 1, 32 samples, minibatches of 8, meant
    /// for the smaller train set that the table can actually cover.
    pub fn mt(train_dir: impl Into<PathBuf>, validation_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            estimator: Estimator::Mt,
            beta: 1.0,
            ..TrainConfig::fmc(train_dir, validation_dir)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig = toml::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if self.n_samples < 1 {
            return bad("n_samples must be at least 1");
        }
        if self.minibatch < 1 {
            return bad("minibatch must be at least 1");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        if self.validation_period < 1 {
            return bad("validation_period must be at least 1");
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return bad("beta must be finite and nonnegative");
        }
        if self.estimator == Estimator::Fmc && !(self.tau.is_finite() && self.tau > 0.0) {
            return bad("the fmc estimator needs a positive tau");
        }
        Ok(())
    }
}

/// One line of the training log. Everything except the wall clock is a
/// pure function of (config, seed), which is what the reproducibility
/// tests compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    /// Minibatch mean of the best sampled objective, in MW (lower is
    /// better). The annealed objective itself is intractable at scale,
    /// so this is the progress proxy.
    pub mean_best_mw: f64,
    /// Minibatch mean entropy of the factored decision distribution.
    pub mean_entropy: f64,
    /// Validation mean exchange capacity when this iteration ran one.
    pub validation_mw: Option<f64>,
    pub wall_s: f64,
}

/// Write the log as newline-delimited JSON, one record per line.
pub fn write_log(path: &Path, records: &[LogRecord]) -> Result<(), TrainError> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("log records serialize");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation mean capacity seen.
    pub checkpoint: Checkpoint,
    pub best_validation_mw: f64,
    pub log: Vec<LogRecord>,
    /// Populated for the mt estimator, which carries its table through
    /// the run; None for the sampling-only estimators.
    pub memory: Option<MemoryTable>,
    /// Contexts dropped because their all-closed topology is already
    /// infeasible; they have no baseline score to improve on.
    pub skipped_train: usize,
    pub skipped_validation: usize,
}

struct TrainContext<'a> {
    input: GridInput,
    eval: ContextEval<'a>,
}

fn usable_contexts(grids: &[Grid]) -> Result<(Vec<Grid>, usize), TrainError> {
    let mut usable = Vec::with_capacity(grids.len());
    let mut skipped = 0;
    let mut seen = std::collections::BTreeSet::new();
    for g in grids {
        if !seen.insert(g.context_id.as_str()) {
            return Err(TrainError::DuplicateContext(g.context_id.clone()));
        }
        match ContextEval::new(g) {
            Ok(_) => usable.push(g.clone()),
            Err(SurrogateError::AllClosedInfeasible) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((usable, skipped))
}

fn build_contexts<'a>(
    grids: &'a [Grid],
    normalizer: &EcdfNormalizer,
) -> Result<Vec<TrainContext<'a>>, TrainError> {
    grids
        .iter()
        .map(|g| {
            Ok(TrainContext {
                input: GridInput::from_normalized(&normalizer.apply(g)),
                eval: ContextEval::new(g)?,
            })
        })
        .collect()
}

/// Validation value of the current parameters: mean capacity of the
/// most probable decision per context. An infeasible proposal counts
/// as the negated training penalty, so a model that strands load
/// scores far below one that leaves every switch alone.
fn validation_mean_mw(
    model: &H2mgNodeModel,
    contexts: &mut [TrainContext],
) -> Result<f64, TrainError> {
    let caps = contexts
        .par_iter_mut()
        .map(|ctx| {
            let mode = most_probable_decision(&model.scores(&ctx.input));
            Ok(match ctx.eval.feasible_objective(&mode)? {
                Some(f) => -f,
                None => -ctx.eval.penalty_mw(),
            })
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(caps.iter().sum::<f64>() / caps.len() as f64)
}

/// One context's share of a minibatch after the parallel phase.
struct Sampled {
    ctx_index: usize,
    z: Vec<f64>,
    tape: Tape,
    scored: Vec<(Decision, f64)>,
    best_mw: f64,
    entropy: f64,
    ghat: Vec<f64>,
}

/// RNG stream for one (iteration, slot) cell. Stream 0 picks
/// minibatches and u64::MAX initializes parameters, so per-context
/// sampling starts at 1.
fn sample_stream(iteration: usize, minibatch: usize, slot: usize) -> u64 {
    1 + ((iteration - 1) * minibatch + slot) as u64
}

/// Minibatched amortized-optimization loop. Per iteration: draw a
/// minibatch, run the forward pass and candidate scoring per context in
/// parallel, commit memory-table updates and pick the estimator's
/// gradient serially, backpropagate per context in parallel, then apply
/// one clipped Adam step to the averaged gradient. Validation runs
/// every `validation_period` iterations and once more at the end; the
/// checkpoint with the best validation mean capacity is kept.
///
/// `memory` seeds the mt estimator's table, letting a run resume where
/// a previous one left off; it is ignored by mc and fmc.
pub fn train(
    config: &TrainConfig,
    train_set: &[Grid],
    validation_set: &[Grid],
    memory: Option<MemoryTable>,
) -> Result<TrainOutcome, TrainError> {
    config.check()?;
    let started = Instant::now();
    let (train_grids, skipped_train) = usable_contexts(train_set)?;
    let (validation_grids, skipped_validation) = usable_contexts(validation_set)?;
    if train_grids.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if validation_grids.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let normalizer = EcdfNormalizer::fit(&train_grids, NORMALIZER_KNOTS);
    let mut train_ctx = build_contexts(&train_grids, &normalizer)?;
    let mut validation_ctx = build_contexts(&validation_grids, &normalizer)?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(u64::MAX);
    let mut model = H2mgNodeModel::init(&config.profile.model_config(), &mut init_rng);
    let mut params = model.flatten_params();
    let mut adam = AdamState::new(params.len());
    let mut pick_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut table = match config.estimator {
        Estimator::Mt => Some(memory.unwrap_or_default()),
        _ => None,
    };

    let mut log = Vec::with_capacity(config.max_iterations);
    let mut best: Option<(f64, Checkpoint)> = None;
    for iteration in 1..=config.max_iterations {
        let k = config.minibatch.min(train_ctx.len());
        let chosen = rand::seq::index::sample(&mut pick_rng, train_ctx.len(), k).into_vec();

        let mut picked: Vec<Option<&mut TrainContext>> =
            train_ctx.iter_mut().map(Some).collect();
        let batch: Vec<(usize, usize, &mut TrainContext)> = chosen
            .iter()
            .enumerate()
            .map(|(slot, &i)| (slot, i, picked[i].take().expect("minibatch indices distinct")))
            .collect();
        let mut sampled = batch
            .into_par_iter()
            .map(|(slot, ctx_index, ctx)| {
                let (z, tape) = model.forward(&ctx.input);
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(sample_stream(iteration, config.minibatch, slot));
                let candidates = sample_decisions(
                    &z,
                    ctx.eval.grid(),
                    config.n_samples,
                    config.sampling,
                    &mut rng,
                )?;
                let scored = ctx.eval.score_all(&candidates)?;
                let best_mw = scored
                    .iter()
                    .map(|&(_, f)| f)
                    .fold(f64::INFINITY, f64::min);
                let entropy = entropy(&z);
                Ok(Sampled {
                    ctx_index,
                    z,
                    tape,
                    scored,
                    best_mw,
                    entropy,
                    ghat: Vec::new(),
                })
            })
            .collect::<Result<Vec<Sampled>, TrainError>>()?;

        let mean_best_mw = sampled.iter().map(|s| s.best_mw).sum::<f64>() / sampled.len() as f64;
        let mean_entropy = sampled.iter().map(|s| s.entropy).sum::<f64>() / sampled.len() as f64;
        if !mean_best_mw.is_finite() || !mean_entropy.is_finite() {
            return Err(TrainError::Diverged {
                iteration,
                what: format!(
                    "loss proxy is not finite (sampled best {mean_best_mw}, entropy {mean_entropy})"
                ),
            });
        }

        for s in &mut sampled {
            s.ghat = match config.estimator {
                Estimator::Mc => grad_mc(&s.z, &s.scored, config.beta)?,
                Estimator::Fmc => grad_fmc(&s.z, &s.scored, config.beta, config.tau)?,
                Estimator::Mt => {
                    let table = table.as_mut().expect("mt estimator carries a table");
                    let eval = &train_ctx[s.ctx_index].eval;
                    let id = eval.grid().context_id.clone();
                    table.seed(&id, Decision::all_closed(s.z.len()), eval.all_closed_mw());
                    let feasible: Vec<(Decision, f64)> = s
                        .scored
                        .iter()
                        .filter(|&&(_, f)| f < eval.penalty_mw())
                        .cloned()
                        .collect();
                    table.update(&id, &feasible)?;
                    let entry = table.get(&id).expect("just seeded");
                    grad_mt(&s.z, &entry.decision, config.beta)?
                }
            };
        }

        let grads = sampled
            .par_iter()
            .map(|s| {
                model
                    .backward(&train_ctx[s.ctx_index].input, &s.tape, &s.ghat)
                    .flatten()
            })
            .collect::<Vec<Vec<f64>>>();
        let mut mean_grad = vec![0.0; params.len()];
        for g in &grads {
            for (m, v) in mean_grad.iter_mut().zip(g) {
                *m += v;
            }
        }
        let scale = 1.0 / grads.len() as f64;
        for m in &mut mean_grad {
            *m *= scale;
        }
        adam_step(&mut params, &mean_grad, &mut adam).map_err(|e| match e {
            GnnError::NonFiniteGradient { index } => TrainError::Diverged {
                iteration,
                what: format!("non-finite gradient component {index}"),
            },
            other => TrainError::Gnn(other),
        })?;
        model.assign_params(&params)?;

        let validate = iteration % config.validation_period == 0
            || iteration == config.max_iterations;
        let validation_mw = if validate {
            let v = validation_mean_mw(&model, &mut validation_ctx)?;
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, Checkpoint::capture(&model, &normalizer)));
            }
            Some(v)
        } else {
            None
        };
        log.push(LogRecord {
            iteration,
            mean_best_mw,
            mean_entropy,
            validation_mw,
            wall_s: started.elapsed().as_secs_f64(),
        });
    }

    let (best_validation_mw, checkpoint) =
        best.expect("the final iteration always runs a validation");
    Ok(TrainOutcome {
        checkpoint,
        best_validation_mw,
        log,
        memory: table,
        skipped_train,
        skipped_validation,
    })
}

/// Most probable decision of a restored model on one raw grid.
pub fn decide(checkpoint: &Checkpoint, grid: &Grid) -> Result<Decision, TrainError> {
    Ok(decide_with(
        &checkpoint.restore()?,
        &checkpoint.normalizer,
        grid,
    ))
}

/// Same, with the model already restored; use this when sweeping many
/// contexts against one checkpoint.
pub fn decide_with(model: &H2mgNodeModel, normalizer: &EcdfNormalizer, grid: &Grid) -> Decision {
    most_probable_decision(&model.scores(&GridInput::from_normalized(&normalizer.apply(grid))))
}

/// The ensemble rule over two candidate decisions: evaluate both, keep
/// the strictly better one, prefer the memory-table decision on ties,
/// and treat infeasibility as losing outright. Both infeasible falls
/// back to every switch closed.
pub fn ensemble_pick(
    grid: &Grid,
    fmc: Decision,
    mt: Decision,
) -> Result<Decision, TrainError> {
    let objective = |d: &Decision| -> Result<Option<f64>, TrainError> {
        Ok(exchange_capacity(grid, d)?.objective_mw())
    };
    match (objective(&fmc)?, objective(&mt)?) {
        (None, None) => Ok(Decision::all_closed(grid.n_switches())),
        (Some(_), None) => Ok(fmc),
        (None, Some(_)) => Ok(mt),
        (Some(f), Some(m)) => Ok(if f < m { fmc } else { mt }),
    }
}

/// Ensemble of two trained checkpoints on one grid.
pub fn ensemble_decide(
    ckpt_fmc: &Checkpoint,
    ckpt_mt: &Checkpoint,
    grid: &Grid,
) -> Result<Decision, TrainError> {
    ensemble_pick(grid, decide(ckpt_fmc, grid)?, decide(ckpt_mt, grid)?)
}

/// What one method did on one context. `capacity_mw` is None when the
/// method's decision has no feasible operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub context_id: String,
    pub decision: Decision,
    pub capacity_mw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContextMetrics {
    pub context_id: String,
    /// Achieved capacity in p.u. on the 100 MW base; None if the
    /// decision was infeasible.
    pub capacity_pu: Option<f64>,
    /// The two references, in p.u., carried along so reports can bin
    /// capacity deltas without re-solving anything.
    pub all_closed_pu: f64,
    pub solver_pu: f64,
    /// (capacity - all_closed) / (solver - all_closed); None when the
    /// context is excluded or the decision infeasible.
    pub normalized: Option<f64>,
    /// Percent capacity gain over all-closed; None when infeasible or
    /// when the all-closed capacity is too close to zero to divide by.
    pub improvement_pct: Option<f64>,
    pub openings: usize,
    /// The solver reference did not beat all-closed here, so the
    /// normalized score has no meaningful denominator.
    pub excluded: bool,
}

/// Aggregate metrics over one method's decisions. Summary means are
/// computed in context-id order so they are exactly independent of
/// input order; per-context rows keep the caller's order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_context: Vec<ContextMetrics>,
    pub n_contexts: usize,
    /// Mean capacity in p.u. over contexts with a feasible decision.
    pub mean_capacity_pu: f64,
    /// Reference means over all contexts.
    pub mean_all_closed_pu: f64,
    pub mean_solver_pu: f64,
    /// Mean normalized score over non-excluded feasible contexts.
    pub mean_normalized: f64,
    pub mean_improvement_pct: f64,
    pub mean_openings: f64,
    /// Percent of contexts opening each switch, indexed like the grid's
    /// switch list.
    pub usage_pct: Vec<f64>,
    pub mean_usage_pct: f64,
    pub never_used: usize,
    pub infeasible_count: usize,
    pub excluded_count: usize,
}

fn checked_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Score one method against the all-closed and solver references,
/// aligned by context id. Contexts where the solver reference is no
/// better than all-closed are flagged, kept out of the normalized-score
/// aggregate, and counted.
pub fn evaluate(
    results: &[MethodResult],
    all_closed_mw: &BTreeMap<String, f64>,
    solver_mw: &BTreeMap<String, f64>,
) -> Result<MetricsReport, TrainError> {
    let first = results.first().ok_or(TrainError::EmptyDataset("evaluation"))?;
    let n_switches = first.decision.len();
    let mut seen = std::collections::BTreeSet::new();
    let mut open_counts = vec![0usize; n_switches];
    let mut per_context = Vec::with_capacity(results.len());
    for r in results {
        if !seen.insert(r.context_id.as_str()) {
            return Err(TrainError::DuplicateContext(r.context_id.clone()));
        }
        if r.decision.len() != n_switches {
            return Err(TrainError::DecisionLength {
                context_id: r.context_id.clone(),
                expected: n_switches,
                got: r.decision.len(),
            });
        }
        let closed = *all_closed_mw
            .get(&r.context_id)
            .ok_or_else(|| TrainError::MissingReference(r.context_id.clone()))?;
        let solver = *solver_mw
            .get(&r.context_id)
            .ok_or_else(|| TrainError::MissingReference(r.context_id.clone()))?;
        let excluded = solver <= closed + EXCLUSION_TOL_MW;
        for (e, &state) in r.decision.states.iter().enumerate() {
            if state == 0 {
                open_counts[e] += 1;
            }
        }
        let normalized = match r.capacity_mw {
            Some(cap) if !excluded => Some((cap - closed) / (solver - closed)),
            _ => None,
        };
        let improvement_pct = match r.capacity_mw {
            Some(cap) if closed.abs() > EXCLUSION_TOL_MW => {
                Some(100.0 * (cap - closed) / closed)
            }
            _ => None,
        };
        per_context.push(ContextMetrics {
            context_id: r.context_id.clone(),
            capacity_pu: r.capacity_mw.map(|c| c / 100.0),
            all_closed_pu: closed / 100.0,
            solver_pu: solver / 100.0,
            normalized,
            improvement_pct,
            openings: r.decision.openings(),
            excluded,
        });
    }

    let mut ordered: Vec<&ContextMetrics> = per_context.iter().collect();
    ordered.sort_by(|a, b| a.context_id.cmp(&b.context_id));
    let n_contexts = per_context.len();
    let usage_pct: Vec<f64> = open_counts
        .iter()
        .map(|&c| 100.0 * c as f64 / n_contexts as f64)
        .collect();
    Ok(MetricsReport {
        n_contexts,
        mean_capacity_pu: checked_mean(ordered.iter().filter_map(|m| m.capacity_pu)),
        mean_all_closed_pu: checked_mean(ordered.iter().map(|m| m.all_closed_pu)),
        mean_solver_pu: checked_mean(ordered.iter().map(|m| m.solver_pu)),
        mean_normalized: checked_mean(ordered.iter().filter_map(|m| m.normalized)),
        mean_improvement_pct: checked_mean(ordered.iter().filter_map(|m| m.improvement_pct)),
        mean_openings: checked_mean(ordered.iter().map(|m| m.openings as f64)),
        mean_usage_pct: checked_mean(usage_pct.iter().copied()),
        never_used: usage_pct.iter().filter(|&&p| p == 0.0).count(),
        infeasible_count: ordered.iter().filter(|m| m.capacity_pu.is_none()).count(),
        excluded_count: ordered.iter().filter(|m| m.excluded).count(),
        usage_pct,
        per_context,
    })
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-context CSV: one row per context in input order, then a summary
/// row whose count columns hold the infeasible and excluded totals.
pub fn write_metrics_csv(report: &MetricsReport, path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("# schema: metrics-v1\n");
    out.push_str(
        "context_id,capacity_pu,all_closed_pu,solver_pu,normalized_score,improvement_pct,\
         openings,infeasible,excluded\n",
    );
    for m in &report.per_context {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            m.context_id,
            csv_opt(m.capacity_pu),
            m.all_closed_pu,
            m.solver_pu,
            csv_opt(m.normalized),
            csv_opt(m.improvement_pct),
            m.openings,
            m.capacity_pu.is_none(),
            m.excluded,
        ));
    }
    out.push_str(&format!(
        "summary,{},{},{},{},{},{},{},{}\n",
        report.mean_capacity_pu,
        report.mean_all_closed_pu,
        report.mean_solver_pu,
        report.mean_normalized,
        report.mean_improvement_pct,
        report.mean_openings,
        report.infeasible_count,
        report.excluded_count,
    ));
    fs::write(path, out)?;
    Ok(())
}

/// Per-switch usage CSV, with a trailing mean row.
pub fn write_usage_csv(report: &MetricsReport, path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("# schema: usage-v1\n");
    out.push_str("switch,usage_pct\n");
    for (e, pct) in report.usage_pct.iter().enumerate() {
        out.push_str(&format!("{e},{pct}\n"));
    }
    out.push_str(&format!("mean,{}\n", report.mean_usage_pct));
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_base_case, four_substation_case, sample_context, NoiseConfig};
    use crate::grid::{Injection, Line, Switch, Zone};

    fn sampled_set(n: usize, stream_base: u64) -> Vec<Grid> {
        let base = build_base_case(&four_substation_case()).unwrap();
        let noise = NoiseConfig::default();
        let mut out = Vec::new();
        let mut stream = stream_base;
        while out.len() < n {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            rng.set_stream(stream);
            let mut g = sample_context(&base, &noise, &mut rng).unwrap();
            g.context_id = format!("ctx-{stream}");
            stream += 1;
            if ContextEval::new(&g).is_ok() {
                out.push(g);
            }
        }
        out
    }

    fn smoke_config(dir: &str) -> TrainConfig {
        let mut config = TrainConfig::mt(dir, dir);
        config.profile = Profile::Tiny;
        config.max_iterations = 30;
        config.validation_period = 10;
        config.n_samples = 8;
        config.minibatch = 4;
        config.seed = 5;
        config
    }

    /// Two parallel export lines with unequal reactance. Closed, the
    /// stiff line saturates at a 3:1 split and caps the exchange at
    /// 160 MW; opening the north coupler decouples the generators and
    /// lifts it to 240 MW. Opening either south switch instead feeds
    /// the big load through one line and caps the exchange at 150 MW.
    fn spread_grid() -> Grid {
        Grid::new(
            "spread",
            5,
            vec![
                Injection::new(0, 100.0, Zone::Z1),
                Injection::new(1, 100.0, Zone::Z1),
            ],
            vec![
                Injection::new(2, 160.0, Zone::Z2),
                Injection::new(3, 40.0, Zone::Z2),
            ],
            vec![
                Switch {
                    from: 0,
                    to: 1,
                    substation: "north".to_string(),
                },
                Switch {
                    from: 2,
                    to: 4,
                    substation: "south".to_string(),
                },
                Switch {
                    from: 4,
                    to: 3,
                    substation: "south".to_string(),
                },
            ],
            vec![
                Line {
                    from: 0,
                    to: 2,
                    f_bar_mw: 120.0,
                    x_pu: 0.05,
                    s: 1,
                    in_service: true,
                },
                Line {
                    from: 1,
                    to: 3,
                    f_bar_mw: 120.0,
                    x_pu: 0.15,
                    s: 1,
                    in_service: true,
                },
            ],
        )
    }

    /// One switch whose opening strands a fixed load, making the LP
    /// infeasible.
    fn strandable_grid() -> Grid {
        Grid::new(
            "strandable",
            4,
            vec![Injection::new(0, 120.0, Zone::Z1)],
            vec![
                Injection::new(2, 50.0, Zone::Z1),
                Injection::new(3, 70.0, Zone::Z2),
            ],
            vec![Switch {
                from: 1,
                to: 2,
                substation: "t".to_string(),
            }],
            vec![
                Line {
                    from: 0,
                    to: 1,
                    f_bar_mw: 999.0,
                    x_pu: 0.05,
                    s: 0,
                    in_service: true,
                },
                Line {
                    from: 0,
                    to: 3,
                    f_bar_mw: 100.0,
                    x_pu: 0.05,
                    s: 1,
                    in_service: true,
                },
            ],
        )
    }

    /// Valid grid whose all-closed LP is infeasible: the internal line
    /// cannot carry what the big load draws.
    fn overloaded_grid() -> Grid {
        Grid::new(
            "overloaded",
            3,
            vec![Injection::new(0, 100.0, Zone::Z1)],
            vec![
                Injection::new(1, 1000.0, Zone::Z1),
                Injection::new(2, 50.0, Zone::Z2),
            ],
            Vec::new(),
            vec![
                Line {
                    from: 0,
                    to: 1,
                    f_bar_mw: 10.0,
                    x_pu: 0.05,
                    s: 0,
                    in_service: true,
                },
                Line {
                    from: 0,
                    to: 2,
                    f_bar_mw: 100.0,
                    x_pu: 0.05,
                    s: 1,
                    in_service: true,
                },
            ],
        )
    }

    #[test]
    fn presets_carry_the_published_hyperparameters() {
        let fmc = TrainConfig::fmc("a", "b");
        assert_eq!(fmc.estimator, Estimator::Fmc);
        assert_eq!((fmc.beta, fmc.tau), (0.1, 20.0));
        assert_eq!((fmc.n_samples, fmc.minibatch), (32, 8));
        let mt = TrainConfig::mt("a", "b");
        assert_eq!(mt.estimator, Estimator::Mt);
        assert_eq!(mt.beta, 1.0);
        assert_eq!((mt.n_samples, mt.minibatch), (32, 8));
        assert_eq!(mt.sampling, SamplingPolicy::exploration());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let config = TrainConfig::mt("data/train", "data/val");
        let text = toml::to_string(&config).unwrap();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), config);
        // Prepended so the typo stays top-level instead of falling
        // into the trailing [sampling] table.
        let with_typo = format!("max_iteratons = 5\n{text}");
        assert!(matches!(
            TrainConfig::from_toml_str(&with_typo).unwrap_err(),
            TrainError::Toml(_)
        ));
        let minimal = "estimator = \"fmc\"\nbeta = 0.1\nmax_iterations = 10\n\
                       train_dir = \"t\"\nvalidation_dir = \"v\"\nprofile = \"tiny\"\n";
        let parsed = TrainConfig::from_toml_str(minimal).unwrap();
        assert_eq!((parsed.tau, parsed.n_samples, parsed.minibatch), (20.0, 32, 8));
        assert_eq!(parsed.sampling, SamplingPolicy::exploration());
    }

    #[test]
    fn config_check_rejects_degenerate_values() {
        let mut config = TrainConfig::fmc("a", "b");
        config.tau = 0.0;
        assert!(matches!(config.check(), Err(TrainError::Config(_))));
        let mut config = TrainConfig::mt("a", "b");
        config.max_iterations = 0;
        assert!(matches!(config.check(), Err(TrainError::Config(_))));
    }

    #[test]
    fn smoke_run_trains_validates_and_keeps_the_best() {
        let train_set = sampled_set(6, 0);
        let validation_set = sampled_set(4, 100);
        let config = smoke_config("unused");
        let outcome = train(&config, &train_set, &validation_set, None).unwrap();
        assert_eq!(outcome.log.len(), 30);
        let validated: Vec<&LogRecord> = outcome
            .log
            .iter()
            .filter(|r| r.validation_mw.is_some())
            .collect();
        assert_eq!(
            validated.iter().map(|r| r.iteration).collect::<Vec<_>>(),
            vec![10, 20, 30]
        );
        let max_seen = validated
            .iter()
            .map(|r| r.validation_mw.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(outcome.best_validation_mw, max_seen);
        assert_eq!(outcome.skipped_train, 0);
        // Every train context gets minibatched at least once over 30
        // iterations, so each has a memory entry.
        let table = outcome.memory.unwrap();
        assert_eq!(table.len(), 6);
        let model = outcome.checkpoint.restore().unwrap();
        let d = decide_with(&model, &outcome.checkpoint.normalizer, &train_set[0]);
        assert_eq!(d.len(), train_set[0].n_switches());
    }

    #[test]
    fn identical_seeds_reproduce_the_log_exactly() {
        let train_set = sampled_set(5, 200);
        let validation_set = sampled_set(3, 300);
        let mut config = smoke_config("unused");
        config.max_iterations = 12;
        config.validation_period = 5;
        let a = train(&config, &train_set, &validation_set, None).unwrap();
        let b = train(&config, &train_set, &validation_set, None).unwrap();
        assert_eq!(a.log.len(), b.log.len());
        for (ra, rb) in a.log.iter().zip(&b.log) {
            assert_eq!(ra.iteration, rb.iteration);
            assert_eq!(ra.mean_best_mw, rb.mean_best_mw);
            assert_eq!(ra.mean_entropy, rb.mean_entropy);
            assert_eq!(ra.validation_mw, rb.validation_mw);
        }
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
    }

    #[test]
    fn oversized_validation_period_validates_once_at_the_end() {
        let train_set = sampled_set(3, 400);
        let validation_set = sampled_set(2, 500);
        let mut config = smoke_config("unused");
        config.max_iterations = 5;
        config.validation_period = 100;
        let outcome = train(&config, &train_set, &validation_set, None).unwrap();
        let validated: Vec<usize> = outcome
            .log
            .iter()
            .filter(|r| r.validation_mw.is_some())
            .map(|r| r.iteration)
            .collect();
        assert_eq!(validated, vec![5]);
        assert_eq!(
            outcome.best_validation_mw,
            outcome.log.last().unwrap().validation_mw.unwrap()
        );
    }

    #[test]
    fn infeasible_all_closed_contexts_are_skipped_not_fatal() {
        let mut train_set = sampled_set(3, 600);
        train_set.push(overloaded_grid());
        let validation_set = sampled_set(2, 700);
        let mut config = smoke_config("unused");
        config.max_iterations = 2;
        let outcome = train(&config, &train_set, &validation_set, None).unwrap();
        assert_eq!(outcome.skipped_train, 1);
        assert_eq!(outcome.skipped_validation, 0);
        assert!(matches!(
            train(&config, &[overloaded_grid()], &validation_set, None).unwrap_err(),
            TrainError::EmptyDataset("train")
        ));
        assert!(matches!(
            train(&config, &train_set, &[], None).unwrap_err(),
            TrainError::EmptyDataset("validation")
        ));
    }

    #[test]
    fn duplicate_context_ids_are_rejected_up_front() {
        // Sampling straight from a base case keeps its context id, so
        // a caller that forgets to relabel would otherwise collapse
        // the memory table into a single entry.
        let mut train_set = sampled_set(2, 900);
        train_set[1].context_id = train_set[0].context_id.clone();
        let validation_set = sampled_set(2, 950);
        let mut config = smoke_config("unused");
        config.max_iterations = 1;
        assert!(matches!(
            train(&config, &train_set, &validation_set, None).unwrap_err(),
            TrainError::DuplicateContext(_)
        ));
    }

    #[test]
    fn log_files_hold_one_json_record_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.log");
        let records = vec![
            LogRecord {
                iteration: 1,
                mean_best_mw: -10.0,
                mean_entropy: 2.0,
                validation_mw: None,
                wall_s: 0.5,
            },
            LogRecord {
                iteration: 2,
                mean_best_mw: -11.0,
                mean_entropy: 1.9,
                validation_mw: Some(520.0),
                wall_s: 1.0,
            },
        ];
        write_log(&path, &records).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let back: Vec<LogRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(back, records);
    }

    #[test]
    fn ensemble_prefers_the_strictly_better_decision() {
        let grid = spread_grid();
        let coupler_open = Decision::new(vec![0, 1, 1]).unwrap();
        let closed = Decision::all_closed(3);
        assert_eq!(
            ensemble_pick(&grid, closed.clone(), coupler_open.clone()).unwrap(),
            coupler_open
        );
        assert_eq!(
            ensemble_pick(&grid, coupler_open.clone(), closed).unwrap(),
            coupler_open
        );
    }

    #[test]
    fn ensemble_ties_go_to_the_memory_table_side() {
        let grid = spread_grid();
        // Both single-switch openings in the south substation leave the
        // same bus partition, so their objectives tie exactly.
        let open_first = Decision::new(vec![1, 0, 1]).unwrap();
        let open_second = Decision::new(vec![1, 1, 0]).unwrap();
        let picked = ensemble_pick(&grid, open_first, open_second.clone()).unwrap();
        assert_eq!(picked, open_second);
    }

    #[test]
    fn ensemble_drops_infeasible_sides() {
        let grid = strandable_grid();
        let open = Decision::new(vec![0]).unwrap();
        let closed = Decision::all_closed(1);
        assert_eq!(
            ensemble_pick(&grid, open.clone(), closed.clone()).unwrap(),
            closed
        );
        assert_eq!(
            ensemble_pick(&grid, closed.clone(), open.clone()).unwrap(),
            closed
        );
        assert_eq!(ensemble_pick(&grid, open.clone(), open).unwrap(), closed);
    }

    #[test]
    fn decide_matches_a_manual_forward_pass() {
        let grids = sampled_set(2, 800);
        let normalizer = EcdfNormalizer::fit(&grids, 8);
        let model = H2mgNodeModel::init(
            &ModelConfig::tiny(),
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let ckpt = Checkpoint::capture(&model, &normalizer);
        let manual = most_probable_decision(
            &model.scores(&GridInput::from_normalized(&normalizer.apply(&grids[0]))),
        );
        assert_eq!(decide(&ckpt, &grids[0]).unwrap(), manual);
    }

    fn reference_maps(
        ids: &[&str],
        closed: f64,
        solver: f64,
    ) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let closed_map = ids.iter().map(|id| (id.to_string(), closed)).collect();
        let solver_map = ids.iter().map(|id| (id.to_string(), solver)).collect();
        (closed_map, solver_map)
    }

    #[test]
    fn all_closed_scored_against_itself_is_the_zero_row() {
        let ids: Vec<String> = (0..10).map(|i| format!("c{i}")).collect();
        let results: Vec<MethodResult> = ids
            .iter()
            .map(|id| MethodResult {
                context_id: id.clone(),
                decision: Decision::all_closed(57),
                capacity_mw: Some(1000.0),
            })
            .collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let (closed, solver) = reference_maps(&id_refs, 1000.0, 1100.0);
        let report = evaluate(&results, &closed, &solver).unwrap();
        assert_eq!(report.mean_capacity_pu, 10.0);
        assert_eq!(report.mean_normalized, 0.0);
        assert_eq!(report.mean_improvement_pct, 0.0);
        assert_eq!(report.mean_openings, 0.0);
        assert_eq!(report.never_used, 57);
        assert_eq!(report.mean_usage_pct, 0.0);
        assert_eq!((report.infeasible_count, report.excluded_count), (0, 0));
    }

    #[test]
    fn the_solver_scores_one_on_every_non_excluded_context() {
        let mut results = Vec::new();
        let mut closed = BTreeMap::new();
        let mut solver = BTreeMap::new();
        for i in 0..10 {
            let id = format!("c{i}");
            let closed_mw = 1000.0 + i as f64;
            // Two contexts where the solver failed to improve.
            let solver_mw = if i < 2 { closed_mw } else { closed_mw + 60.0 };
            closed.insert(id.clone(), closed_mw);
            solver.insert(id.clone(), solver_mw);
            results.push(MethodResult {
                context_id: id,
                decision: Decision::new(vec![0, 1, 1, 1, 0, 1]).unwrap(),
                capacity_mw: Some(solver_mw),
            });
        }
        let report = evaluate(&results, &closed, &solver).unwrap();
        assert_eq!(report.excluded_count, 2);
        for m in &report.per_context {
            match m.excluded {
                true => assert_eq!(m.normalized, None),
                false => assert_eq!(m.normalized, Some(1.0)),
            }
        }
        assert_eq!(report.mean_normalized, 1.0);
        assert_eq!(report.mean_openings, 2.0);
        assert_eq!(report.never_used, 4);
    }

    #[test]
    fn usage_counts_openings_per_switch_across_contexts() {
        let n = 100;
        let mut results = Vec::new();
        for i in 0..n {
            let mut states = vec![1u8; 5];
            if i < 4 {
                states[3] = 0;
            }
            results.push(MethodResult {
                context_id: format!("c{i:03}"),
                decision: Decision::new(states).unwrap(),
                capacity_mw: Some(500.0),
            });
        }
        let ids: Vec<String> = (0..n).map(|i| format!("c{i:03}")).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let (closed, solver) = reference_maps(&id_refs, 400.0, 500.0);
        let report = evaluate(&results, &closed, &solver).unwrap();
        assert_eq!(report.usage_pct, vec![0.0, 0.0, 0.0, 4.0, 0.0]);
        assert_eq!(report.never_used, 4);
        assert_eq!(report.mean_usage_pct, 0.8);
    }

    #[test]
    fn evaluation_summary_ignores_context_order() {
        let mut results = Vec::new();
        let mut closed = BTreeMap::new();
        let mut solver = BTreeMap::new();
        for i in 0..7 {
            let id = format!("c{i}");
            closed.insert(id.clone(), 900.0 + 17.0 * i as f64);
            solver.insert(id.clone(), 1000.0 + 3.0 * i as f64);
            results.push(MethodResult {
                context_id: id,
                decision: Decision::new(vec![u8::from(i % 2 == 0), 1, 0]).unwrap(),
                capacity_mw: if i == 3 { None } else { Some(950.0 + i as f64) },
            });
        }
        let forward = evaluate(&results, &closed, &solver).unwrap();
        results.reverse();
        let backward = evaluate(&results, &closed, &solver).unwrap();
        assert_eq!(forward.mean_capacity_pu, backward.mean_capacity_pu);
        assert_eq!(forward.mean_normalized, backward.mean_normalized);
        assert_eq!(forward.mean_improvement_pct, backward.mean_improvement_pct);
        assert_eq!(forward.usage_pct, backward.usage_pct);
        assert_eq!(forward.infeasible_count, 1);
    }

    #[test]
    fn evaluation_rejects_broken_alignment() {
        let results = vec![MethodResult {
            context_id: "only".to_string(),
            decision: Decision::all_closed(2),
            capacity_mw: Some(100.0),
        }];
        let empty = BTreeMap::new();
        let (closed, solver) = reference_maps(&["only"], 90.0, 100.0);
        assert!(matches!(
            evaluate(&results, &empty, &solver).unwrap_err(),
            TrainError::MissingReference(_)
        ));
        let twice = vec![results[0].clone(), results[0].clone()];
        assert!(matches!(
            evaluate(&twice, &closed, &solver).unwrap_err(),
            TrainError::DuplicateContext(_)
        ));
        let ragged = vec![
            results[0].clone(),
            MethodResult {
                context_id: "other".to_string(),
                decision: Decision::all_closed(3),
                capacity_mw: None,
            },
        ];
        assert!(matches!(
            evaluate(&ragged, &closed, &solver).unwrap_err(),
            TrainError::DecisionLength { .. }
        ));
    }

    #[test]
    fn metric_csvs_carry_schema_lines_and_summary_rows() {
        let ids = ["a", "b"];
        let results: Vec<MethodResult> = ids
            .iter()
            .map(|id| MethodResult {
                context_id: id.to_string(),
                decision: Decision::new(vec![0, 1]).unwrap(),
                capacity_mw: Some(1100.0),
            })
            .collect();
        let (closed, solver) = reference_maps(&ids, 1000.0, 1200.0);
        let report = evaluate(&results, &closed, &solver).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let metrics_path = dir.path().join("metrics.csv");
        let usage_path = dir.path().join("usage.csv");
        write_metrics_csv(&report, &metrics_path).unwrap();
        write_usage_csv(&report, &usage_path).unwrap();
        let metrics = fs::read_to_string(&metrics_path).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next(), Some("# schema: metrics-v1"));
        assert_eq!(
            lines.next(),
            Some(
                "context_id,capacity_pu,all_closed_pu,solver_pu,normalized_score,\
                 improvement_pct,openings,infeasible,excluded"
            )
        );
        assert_eq!(metrics.lines().count(), 5);
        assert_eq!(
            metrics.lines().last().unwrap(),
            "summary,11,10,12,0.5,10,1,0,0"
        );
        let usage = fs::read_to_string(&usage_path).unwrap();
        assert_eq!(usage.lines().next(), Some("# schema: usage-v1"));
        assert_eq!(usage.lines().count(), 5);
        assert!(usage.contains("0,100\n"));
        assert!(usage.lines().last().unwrap().starts_with("mean,50"));
    }
}
