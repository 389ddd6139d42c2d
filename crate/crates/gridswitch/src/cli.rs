//! Command-line front end. Subcommands cover the whole pipeline: data
//! generation, training, solving single contexts, dataset evaluation,
//! report emission, and a built-in oracle suite. Every run prints its
//! fully resolved configuration, and outputs are byte-reproducible from
//! (config, seed) apart from wall-clock fields.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::{
    build_base_case, four_substation_case, generate_dataset, load_dataset,
    twelve_substation_case, BaseCaseSpec, DatagenError, NoiseConfig,
};
use crate::exact::{branch_and_bound, exhaustive_best, BnbConfig, ExactError};
use crate::gnn::{Checkpoint, GnnError};
use crate::grid::{Decision, Grid, GridFileError};
use crate::lp::{exchange_capacity, ExchangeError};
use crate::surrogate::{
    exact_gradient, exact_objective, filter_scores, grad_mt, sigma, ContextEval, MemoryTable,
    SurrogateError,
};
use crate::train::{
    decide, ensemble_decide, evaluate, train, write_log, write_metrics_csv, write_usage_csv,
    Estimator, MethodResult, Profile, TrainConfig, TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("{0}")]
    EmptyResult(String),
    #[error("self-test failed: {0}")]
    Selftest(String),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Exact(#[from] ExactError),
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
    Csv(#[from] csv::Error),
}

fn exchange_exit(e: &ExchangeError) -> i32 {
    match e {
        ExchangeError::DecisionLength { .. } => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

fn surrogate_exit(e: &SurrogateError) -> i32 {
    match e {
        SurrogateError::AllClosedInfeasible => EXIT_INFEASIBLE,
        SurrogateError::RejectionStalled { .. } | SurrogateError::NoCandidates(_) => {
            EXIT_NUMERICAL
        }
        SurrogateError::Exchange(inner) => exchange_exit(inner),
        _ => EXIT_CONFIG,
    }
}

/// Exit status for a failed run: 2 for anything the user configured
/// wrongly, 3 for infeasible or empty results, 4 for numerical trouble
/// inside the solvers or the training loop.
fn exit_code(e: &CliError) -> i32 {
    match e {
        CliError::Config(_) => EXIT_CONFIG,
        CliError::EmptyResult(_) => EXIT_INFEASIBLE,
        CliError::Selftest(_) => EXIT_NUMERICAL,
        CliError::Datagen(inner) => match inner {
            DatagenError::Exchange { source, .. } => exchange_exit(source),
            _ => EXIT_CONFIG,
        },
        CliError::Train(inner) => match inner {
            TrainError::EmptyDataset(_) => EXIT_INFEASIBLE,
            TrainError::Diverged { .. } => EXIT_NUMERICAL,
            TrainError::Surrogate(s) => surrogate_exit(s),
            TrainError::Exchange(x) => exchange_exit(x),
            TrainError::Gnn(GnnError::NonFiniteGradient { .. }) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        },
        CliError::Exact(inner) => match inner {
            ExactError::AllInfeasible => EXIT_INFEASIBLE,
            ExactError::TooManySwitches(_) => EXIT_CONFIG,
            ExactError::Exchange(x) => exchange_exit(x),
        },
        CliError::Surrogate(inner) => surrogate_exit(inner),
        CliError::Gnn(GnnError::NonFiniteGradient { .. }) => EXIT_NUMERICAL,
        CliError::Gnn(_) => EXIT_CONFIG,
        CliError::Exchange(inner) => exchange_exit(inner),
        CliError::Grid(_) | CliError::Io(_) | CliError::Csv(_) => EXIT_CONFIG,
    }
}

fn default_base() -> String {
    "twelve".to_string()
}

fn default_n() -> usize {
    100
}

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

fn default_estimator() -> String {
    "mt".to_string()
}

fn default_model_profile() -> String {
    "full".to_string()
}

fn default_iterations() -> usize {
    150_000
}

fn default_validation_period() -> usize {
    1000
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

fn default_train_dir() -> PathBuf {
    PathBuf::from("data/train")
}

fn default_validation_dir() -> PathBuf {
    PathBuf::from("data/validation")
}

fn default_dataset() -> PathBuf {
    PathBuf::from("data/test")
}

fn default_method() -> String {
    "all-closed".to_string()
}

fn default_max_openings() -> usize {
    6
}

fn default_gap() -> f64 {
    0.01
}

fn default_time_limit_s() -> f64 {
    600.0
}

fn default_input() -> PathBuf {
    PathBuf::from(".")
}

fn default_bins() -> usize {
    20
}

/// Flat key-value run configuration. A TOML file (via `--config`) sets
/// any subset of these; command-line flags override file values; the
/// rest fall back to the defaults below. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base case for generation: "twelve", "four", or a spec file path.
    pub base: String,
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// Split generation: "desk" (2000/500/500) or "paper"
    /// (850k/100k/10k) instead of a single n-context dataset.
    pub dataset_profile: Option<String>,
    pub estimator: String,
    pub model_profile: String,
    pub iterations: usize,
    pub validation_period: usize,
    /// None picks the estimator preset (0.1 for fmc, 1.0 otherwise).
    pub beta: Option<f64>,
    pub tau: f64,
    pub n_samples: usize,
    pub minibatch: usize,
    pub train_dir: PathBuf,
    pub validation_dir: PathBuf,
    pub dataset: PathBuf,
    pub method: String,
    pub max_openings: usize,
    pub gap: f64,
    pub time_limit_s: f64,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_mt: Option<PathBuf>,
    pub memory: Option<PathBuf>,
    pub input: PathBuf,
    pub bins: usize,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            base: default_base(),
            n: default_n(),
            seed: 0,
            out: default_out(),
            dataset_profile: None,
            estimator: default_estimator(),
            model_profile: default_model_profile(),
            iterations: default_iterations(),
            validation_period: default_validation_period(),
            beta: None,
            tau: default_tau(),
            n_samples: default_n_samples(),
            minibatch: default_minibatch(),
            train_dir: default_train_dir(),
            validation_dir: default_validation_dir(),
            dataset: default_dataset(),
            method: default_method(),
            max_openings: default_max_openings(),
            gap: default_gap(),
            time_limit_s: default_time_limit_s(),
            checkpoint: None,
            checkpoint_mt: None,
            memory: None,
            input: default_input(),
            bins: default_bins(),
            threads: None,
        }
    }
}

impl RunConfig {
    /// TOML parse failures are compacted to the bare message so the
    /// resulting diagnostic stays on one line.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        toml::from_str(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

#[derive(Parser)]
#[command(
    name = "gridswitch",
    version,
    about = "Switching decisions for power exchange capacity"
)]
struct Cli {
    /// Run configuration file; flags override its values.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    /// Cap the worker thread pool.
    #[arg(long, value_name = "N", global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate noisy operating contexts plus a manifest.
    #[command(name = "gen-data")]
    GenData(GenDataArgs),
    /// Train a policy network by self-supervision.
    Train(TrainArgs),
    /// Decide switch states for individual context files.
    Solve(SolveArgs),
    /// Score a method over a dataset against the references.
    Eval(EvalArgs),
    /// Turn evaluation CSVs into summary tables and histogram data.
    Report(ReportArgs),
    /// Run the built-in enumeration and gradient oracle checks.
    Selftest,
}

#[derive(Args)]
struct GenDataArgs {
    /// Contexts to generate.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base case: "twelve", "four", or a spec file path.
    #[arg(long)]
    base: Option<String>,
    /// Generate train/validation/test splits: "desk" or "paper".
    #[arg(long, conflicts_with = "n")]
    profile: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Gradient estimator: mc, fmc, or mt.
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    train_dir: Option<PathBuf>,
    #[arg(long)]
    validation_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    validation_period: Option<usize>,
    /// Model size: tiny or full.
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    minibatch: Option<usize>,
    /// Directory for checkpoint, log, and memory table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Memory table to resume from and persist (mt only).
    #[arg(long)]
    memory: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    /// all-closed, exhaustive, bnb, gnn, or ensemble.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    max_openings: Option<usize>,
    /// Relative optimality gap for bnb.
    #[arg(long)]
    gap: Option<f64>,
    /// Wall-clock budget in seconds for bnb.
    #[arg(long, value_name = "SECONDS")]
    time_limit: Option<f64>,
    /// Trained checkpoint (gnn; the fmc member for ensemble).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// The mt member checkpoint for ensemble.
    #[arg(long)]
    checkpoint_mt: Option<PathBuf>,
    /// Context files to solve.
    #[arg(required = true, value_name = "CONTEXT")]
    contexts: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// all-closed, exhaustive, bnb, gnn, or ensemble.
    #[arg(long)]
    method: Option<String>,
    /// Dataset directory with a manifest.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_mt: Option<PathBuf>,
    /// Directory for the metrics and usage CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_openings: Option<usize>,
    #[arg(long)]
    gap: Option<f64>,
    #[arg(long, value_name = "SECONDS")]
    time_limit: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding *-metrics.csv and *-usage.csv files.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bin count for the value histograms.
    #[arg(long)]
    bins: Option<usize>,
}

macro_rules! override_field {
    ($config:expr, $args:expr, { $($field:ident),* $(,)? }) => {
        $(if let Some(v) = $args.$field.clone() {
            $config.$field = v;
        })*
    };
}

/// Parse argv, run the requested subcommand, and map any failure to a
/// one-line diagnostic plus a stable exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            eprint!("{e}");
            return EXIT_CONFIG;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn log_config(config: &RunConfig) {
    println!(
        "config {}",
        serde_json::to_string(config).expect("run config serializes")
    );
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if let Some(t) = config.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenData(args) => {
            override_field!(config, args, { n, seed, base });
            if let Some(out) = args.out {
                config.out = out;
            }
            if args.profile.is_some() {
                config.dataset_profile = args.profile;
            }
            log_config(&config);
            cmd_gen_data(&config)
        }
        Command::Train(args) => {
            override_field!(config, args, {
                estimator, train_dir, validation_dir, iterations,
                validation_period, seed, tau, n_samples, minibatch,
            });
            if let Some(p) = args.profile {
                config.model_profile = p;
            }
            if args.beta.is_some() {
                config.beta = args.beta;
            }
            if let Some(out) = args.out {
                config.out = out;
            }
            if args.memory.is_some() {
                config.memory = args.memory;
            }
            log_config(&config);
            cmd_train(&config)
        }
        Command::Solve(args) => {
            override_field!(config, args, { method, max_openings, gap });
            if let Some(t) = args.time_limit {
                config.time_limit_s = t;
            }
            if args.checkpoint.is_some() {
                config.checkpoint = args.checkpoint.clone();
            }
            if args.checkpoint_mt.is_some() {
                config.checkpoint_mt = args.checkpoint_mt.clone();
            }
            log_config(&config);
            cmd_solve(&config, &args.contexts)
        }
        Command::Eval(args) => {
            override_field!(config, args, { method, dataset, max_openings, gap });
            if let Some(t) = args.time_limit {
                config.time_limit_s = t;
            }
            if args.checkpoint.is_some() {
                config.checkpoint = args.checkpoint.clone();
            }
            if args.checkpoint_mt.is_some() {
                config.checkpoint_mt = args.checkpoint_mt.clone();
            }
            if let Some(out) = args.out {
                config.out = out;
            }
            log_config(&config);
            cmd_eval(&config)
        }
        Command::Report(args) => {
            override_field!(config, args, { input, bins });
            if let Some(out) = args.out {
                config.out = out;
            }
            log_config(&config);
            cmd_report(&config)
        }
        Command::Selftest => {
            log_config(&config);
            cmd_selftest()
        }
    }
}

fn load_base(name: &str) -> Result<Grid, CliError> {
    let spec = match name {
        "twelve" => twelve_substation_case(),
        "four" => four_substation_case(),
        path => BaseCaseSpec::from_json(&fs::read_to_string(path)?)?,
    };
    Ok(build_base_case(&spec)?)
}

fn cmd_gen_data(config: &RunConfig) -> Result<(), CliError> {
    let base = load_base(&config.base)?;
    let noise = NoiseConfig::default();
    let splits: Vec<(&str, usize, u64)> = match config.dataset_profile.as_deref() {
        None => vec![("", config.n, config.seed)],
        Some("desk") => vec![
            ("train", 2000, config.seed),
            ("validation", 500, config.seed + 1),
            ("test", 500, config.seed + 2),
        ],
        Some("paper") => vec![
            ("train", 850_000, config.seed),
            ("validation", 100_000, config.seed + 1),
            ("test", 10_000, config.seed + 2),
        ],
        Some(other) => {
            return Err(CliError::Config(format!(
                "unknown dataset profile {other:?} (expected desk or paper)"
            )))
        }
    };
    for (name, n, seed) in splits {
        let dir = if name.is_empty() {
            config.out.clone()
        } else {
            config.out.join(name)
        };
        let manifest = generate_dataset(&base, &noise, n, seed, &dir)?;
        let flagged = manifest
            .entries
            .iter()
            .filter(|e| !e.all_closed_feasible)
            .count();
        println!(
            "wrote {} contexts to {} ({} flagged all-closed-infeasible)",
            manifest.entries.len(),
            dir.display(),
            flagged,
        );
    }
    Ok(())
}

fn parse_estimator(name: &str) -> Result<Estimator, CliError> {
    match name {
        "mc" => Ok(Estimator::Mc),
        "fmc" => Ok(Estimator::Fmc),
        "mt" => Ok(Estimator::Mt),
        other => Err(CliError::Config(format!(
            "unknown estimator {other:?} (expected mc, fmc, or mt)"
        ))),
    }
}

fn parse_profile(name: &str) -> Result<Profile, CliError> {
    match name {
        "tiny" => Ok(Profile::Tiny),
        "full" => Ok(Profile::Full),
        other => Err(CliError::Config(format!(
            "unknown model profile {other:?} (expected tiny or full)"
        ))),
    }
}

fn train_config_from(config: &RunConfig) -> Result<TrainConfig, CliError> {
    let estimator = parse_estimator(&config.estimator)?;
    let mut tc = match estimator {
        Estimator::Fmc => TrainConfig::fmc(&config.train_dir, &config.validation_dir),
        _ => TrainConfig::mt(&config.train_dir, &config.validation_dir),
    };
    tc.estimator = estimator;
    if let Some(beta) = config.beta {
        tc.beta = beta;
    }
    tc.tau = config.tau;
    tc.n_samples = config.n_samples;
    tc.minibatch = config.minibatch;
    tc.max_iterations = config.iterations;
    tc.validation_period = config.validation_period;
    tc.seed = config.seed;
    tc.profile = parse_profile(&config.model_profile)?;
    tc.check().map_err(CliError::Train)?;
    Ok(tc)
}

fn cmd_train(config: &RunConfig) -> Result<(), CliError> {
    let tc = train_config_from(config)?;
    let (_, train_grids) = load_dataset(&config.train_dir)?;
    let (_, validation_grids) = load_dataset(&config.validation_dir)?;
    let memory = match &config.memory {
        Some(path) if path.exists() => Some(MemoryTable::load(path)?),
        _ => None,
    };
    let outcome = train(&tc, &train_grids, &validation_grids, memory)?;
    fs::create_dir_all(&config.out)?;
    let checkpoint_path = config.out.join("checkpoint.json");
    outcome.checkpoint.save(&checkpoint_path)?;
    write_log(&config.out.join("train.log"), &outcome.log)?;
    if let Some(table) = &outcome.memory {
        let memory_path = config
            .memory
            .clone()
            .unwrap_or_else(|| config.out.join("memory.json"));
        table.save(&memory_path)?;
    }
    if outcome.skipped_train + outcome.skipped_validation > 0 {
        println!(
            "skipped {} train and {} validation contexts with infeasible all-closed topology",
            outcome.skipped_train, outcome.skipped_validation,
        );
    }
    println!(
        "trained {} iterations, best validation {:.3} MW, checkpoint {}",
        outcome.log.len(),
        outcome.best_validation_mw,
        checkpoint_path.display(),
    );
    Ok(())
}

/// What `solve` and `eval` share: turn one grid into a decision.
enum Method {
    AllClosed,
    Exhaustive,
    Bnb,
    Gnn(Box<Checkpoint>),
    Ensemble(Box<Checkpoint>, Box<Checkpoint>),
}

impl Method {
    fn from_config(config: &RunConfig) -> Result<Self, CliError> {
        let need = |path: &Option<PathBuf>, what: &str| -> Result<Checkpoint, CliError> {
            let path = path.as_ref().ok_or_else(|| {
                CliError::Config(format!("method {:?} needs {what}", config.method))
            })?;
            Ok(Checkpoint::load(path)?)
        };
        match config.method.as_str() {
            "all-closed" => Ok(Method::AllClosed),
            "exhaustive" => Ok(Method::Exhaustive),
            "bnb" => Ok(Method::Bnb),
            "gnn" => Ok(Method::Gnn(Box::new(need(&config.checkpoint, "--checkpoint")?))),
            "ensemble" => Ok(Method::Ensemble(
                Box::new(need(&config.checkpoint, "--checkpoint")?),
                Box::new(need(&config.checkpoint_mt, "--checkpoint-mt")?),
            )),
            other => Err(CliError::Config(format!(
                "unknown method {other:?} (expected all-closed, exhaustive, bnb, gnn, or ensemble)"
            ))),
        }
    }

    fn bnb_config(config: &RunConfig) -> BnbConfig {
        BnbConfig {
            max_openings: config.max_openings,
            gap: config.gap,
            time_limit_s: config.time_limit_s,
        }
    }

    /// The method's decision for one grid, or the reference solver's
    /// decision when it already computed one for this context.
    fn decide(
        &self,
        grid: &Grid,
        config: &RunConfig,
        solver_decision: Option<&Decision>,
    ) -> Result<Decision, CliError> {
        match self {
            Method::AllClosed => Ok(Decision::all_closed(grid.n_switches())),
            Method::Exhaustive => Ok(exhaustive_best(grid, config.max_openings)?.decision),
            Method::Bnb => match solver_decision {
                Some(d) => Ok(d.clone()),
                None => Ok(branch_and_bound(grid, &Self::bnb_config(config))?.decision),
            },
            Method::Gnn(ckpt) => Ok(decide(ckpt, grid)?),
            Method::Ensemble(fmc, mt) => Ok(ensemble_decide(fmc, mt, grid)?),
        }
    }
}

fn open_indices(decision: &Decision) -> Vec<usize> {
    decision
        .states
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s == 0)
        .map(|(e, _)| e)
        .collect()
}

fn cmd_solve(config: &RunConfig, contexts: &[PathBuf]) -> Result<(), CliError> {
    let method = Method::from_config(config)?;
    let mut infeasible = 0usize;
    for path in contexts {
        let grid = Grid::from_json(&fs::read_to_string(path)?)?;
        let decision = method.decide(&grid, config, None)?;
        match exchange_capacity(&grid, &decision)?.capacity_mw() {
            Some(cap) => println!(
                "{}: method={} capacity={:.3} MW ({:.4} pu) openings={} open={:?}",
                grid.context_id,
                config.method,
                cap,
                cap / 100.0,
                decision.openings(),
                open_indices(&decision),
            ),
            None => {
                infeasible += 1;
                println!(
                    "{}: method={} infeasible openings={} open={:?}",
                    grid.context_id,
                    config.method,
                    decision.openings(),
                    open_indices(&decision),
                );
            }
        }
    }
    if infeasible > 0 {
        return Err(CliError::EmptyResult(format!(
            "{infeasible} of {} contexts ended without a feasible operating point",
            contexts.len()
        )));
    }
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Result<(), CliError> {
    let method = Method::from_config(config)?;
    let (_, grids) = load_dataset(&config.dataset)?;
    if grids.is_empty() {
        return Err(CliError::EmptyResult(format!(
            "dataset {} holds no contexts",
            config.dataset.display()
        )));
    }
    struct Scored {
        result: MethodResult,
        closed_mw: f64,
        solver_mw: f64,
    }
    let scored = grids
        .par_iter()
        .map(|grid| {
            let all_closed = Decision::all_closed(grid.n_switches());
            let closed_mw = match exchange_capacity(grid, &all_closed)?.capacity_mw() {
                Some(cap) => cap,
                None => return Ok(None),
            };
            let solver = branch_and_bound(grid, &Method::bnb_config(config))?;
            let decision = method.decide(grid, config, Some(&solver.decision))?;
            let capacity_mw = exchange_capacity(grid, &decision)?.capacity_mw();
            Ok(Some(Scored {
                result: MethodResult {
                    context_id: grid.context_id.clone(),
                    decision,
                    capacity_mw,
                },
                closed_mw,
                solver_mw: solver.capacity_mw,
            }))
        })
        .collect::<Result<Vec<Option<Scored>>, CliError>>()?;
    let skipped = scored.iter().filter(|s| s.is_none()).count();
    let scored: Vec<Scored> = scored.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(CliError::EmptyResult(
            "every context in the dataset is infeasible with all switches closed".to_string(),
        ));
    }
    let mut results = Vec::with_capacity(scored.len());
    let mut closed_map = BTreeMap::new();
    let mut solver_map = BTreeMap::new();
    for s in scored {
        closed_map.insert(s.result.context_id.clone(), s.closed_mw);
        solver_map.insert(s.result.context_id.clone(), s.solver_mw);
        results.push(s.result);
    }
    let report = evaluate(&results, &closed_map, &solver_map)?;
    fs::create_dir_all(&config.out)?;
    let metrics_path = config.out.join(format!("{}-metrics.csv", config.method));
    let usage_path = config.out.join(format!("{}-usage.csv", config.method));
    write_metrics_csv(&report, &metrics_path)?;
    write_usage_csv(&report, &usage_path)?;
    if skipped > 0 {
        println!("skipped {skipped} contexts with infeasible all-closed topology");
    }
    println!(
        "method={} contexts={} mean_capacity={:.4} pu (all-closed {:.4}, solver {:.4})",
        config.method,
        report.n_contexts,
        report.mean_capacity_pu,
        report.mean_all_closed_pu,
        report.mean_solver_pu,
    );
    println!(
        "summary: normalized {:.4}, improvement {:.3}%, openings {:.2}, usage {:.3}%, \
         never-used {}, infeasible {}, excluded {}",
        report.mean_normalized,
        report.mean_improvement_pct,
        report.mean_openings,
        report.mean_usage_pct,
        report.never_used,
        report.infeasible_count,
        report.excluded_count,
    );
    println!("metrics {}", metrics_path.display());
    Ok(())
}

/// Equal-width histogram. Values at or beyond the ends land in the
/// first or last bin, so counts always sum to the input length.
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Histogram {
    assert!(bins >= 1, "a histogram needs at least one bin");
    let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = ((v - lo) / width).floor();
        let i = (i.max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

/// One method's per-context rows, parsed back from a metrics CSV.
struct MethodRows {
    method: String,
    capacity_pu: Vec<Option<f64>>,
    all_closed_pu: Vec<f64>,
    solver_pu: Vec<f64>,
    normalized: Vec<Option<f64>>,
    improvement_pct: Vec<Option<f64>>,
    openings: Vec<usize>,
    excluded: Vec<bool>,
    usage_pct: Vec<f64>,
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>, CliError> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| CliError::Config(format!("bad {what} value {field:?}")))
}

fn parse_req<T: std::str::FromStr>(field: &str, what: &str) -> Result<T, CliError> {
    field
        .parse::<T>()
        .map_err(|_| CliError::Config(format!("bad {what} value {field:?}")))
}

fn csv_records(path: &Path) -> Result<Vec<csv::StringRecord>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(false)
        .from_path(path)?;
    Ok(reader.records().collect::<Result<Vec<_>, _>>()?)
}

fn read_method_rows(dir: &Path, method: &str) -> Result<MethodRows, CliError> {
    let mut rows = MethodRows {
        method: method.to_string(),
        capacity_pu: Vec::new(),
        all_closed_pu: Vec::new(),
        solver_pu: Vec::new(),
        normalized: Vec::new(),
        improvement_pct: Vec::new(),
        openings: Vec::new(),
        excluded: Vec::new(),
        usage_pct: Vec::new(),
    };
    for record in csv_records(&dir.join(format!("{method}-metrics.csv")))? {
        if &record[0] == "summary" {
            continue;
        }
        if record.len() != 9 {
            return Err(CliError::Config(format!(
                "metrics row for {:?} has {} fields, expected 9",
                &record[0],
                record.len()
            )));
        }
        rows.capacity_pu.push(parse_opt(&record[1], "capacity_pu")?);
        rows.all_closed_pu.push(parse_req(&record[2], "all_closed_pu")?);
        rows.solver_pu.push(parse_req(&record[3], "solver_pu")?);
        rows.normalized.push(parse_opt(&record[4], "normalized_score")?);
        rows.improvement_pct
            .push(parse_opt(&record[5], "improvement_pct")?);
        rows.openings.push(parse_req(&record[6], "openings")?);
        let _: bool = parse_req(&record[7], "infeasible")?;
        rows.excluded.push(parse_req(&record[8], "excluded")?);
    }
    for record in csv_records(&dir.join(format!("{method}-usage.csv")))? {
        if &record[0] == "mean" {
            continue;
        }
        rows.usage_pct.push(parse_req(&record[1], "usage_pct")?);
    }
    Ok(rows)
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
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

/// One histogram CSV: the same bin edges for every method (explicit
/// `range`, or pooled min and max) so panels overlay directly.
fn write_hist_csv(
    path: &Path,
    methods: &[MethodRows],
    values_of: impl Fn(&MethodRows) -> Vec<f64>,
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<(), CliError> {
    let per_method: Vec<(String, Vec<f64>)> = methods
        .iter()
        .map(|m| (m.method.clone(), values_of(m)))
        .collect();
    let pooled: Vec<f64> = per_method.iter().flat_map(|(_, v)| v.iter().copied()).collect();
    let mut out = String::from("# schema: hist-v1\nmethod,bin_lo,bin_hi,count\n");
    let bounds = range.or_else(|| {
        if pooled.is_empty() {
            None
        } else {
            Some((
                pooled.iter().cloned().fold(f64::INFINITY, f64::min),
                pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ))
        }
    });
    if let Some((lo, hi)) = bounds {
        for (method, values) in &per_method {
            let h = histogram(values, bins, lo, hi);
            for (i, count) in h.counts.iter().enumerate() {
                out.push_str(&format!(
                    "{method},{},{},{count}\n",
                    h.edges[i],
                    h.edges[i + 1]
                ));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn cmd_report(config: &RunConfig) -> Result<(), CliError> {
    let mut methods = Vec::new();
    let mut names = Vec::new();
    for entry in fs::read_dir(&config.input)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy().into_owned();
        if let Some(method) = name.strip_suffix("-metrics.csv") {
            names.push(method.to_string());
        }
    }
    names.sort();
    for name in &names {
        methods.push(read_method_rows(&config.input, name)?);
    }
    if methods.is_empty() {
        return Err(CliError::EmptyResult(format!(
            "no *-metrics.csv files under {}",
            config.input.display()
        )));
    }
    fs::create_dir_all(&config.out)?;

    // Summary table, one row per method, recomputed from the rows.
    let mut summary = String::from(
        "# schema: report-v1\nmethod,n_contexts,mean_capacity_pu,mean_all_closed_pu,\
         mean_solver_pu,mean_normalized,mean_improvement_pct,mean_openings,mean_usage_pct,\
         never_used,infeasible,excluded\n",
    );
    println!(
        "{:<12} {:>8} {:>12} {:>12} {:>12} {:>11} {:>12} {:>9} {:>10} {:>10}",
        "method",
        "contexts",
        "capacity_pu",
        "normalized",
        "improve_pct",
        "openings",
        "usage_pct",
        "never",
        "infeasible",
        "excluded",
    );
    for m in &methods {
        let n = m.capacity_pu.len();
        let mean_capacity = mean_of(m.capacity_pu.iter().copied().flatten());
        let mean_closed = mean_of(m.all_closed_pu.iter().copied());
        let mean_solver = mean_of(m.solver_pu.iter().copied());
        let mean_normalized = mean_of(m.normalized.iter().copied().flatten());
        let mean_improvement = mean_of(m.improvement_pct.iter().copied().flatten());
        let mean_openings = mean_of(m.openings.iter().map(|&k| k as f64));
        let mean_usage = mean_of(m.usage_pct.iter().copied());
        let never_used = m.usage_pct.iter().filter(|&&p| p == 0.0).count();
        let infeasible = m.capacity_pu.iter().filter(|c| c.is_none()).count();
        let excluded = m.excluded.iter().filter(|&&e| e).count();
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.method,
            n,
            mean_capacity,
            mean_closed,
            mean_solver,
            mean_normalized,
            mean_improvement,
            mean_openings,
            mean_usage,
            never_used,
            infeasible,
            excluded,
        ));
        println!(
            "{:<12} {:>8} {:>12.4} {:>12.4} {:>12.3} {:>11.2} {:>12.3} {:>9} {:>10} {:>10}",
            m.method,
            n,
            mean_capacity,
            mean_normalized,
            mean_improvement,
            mean_openings,
            mean_usage,
            never_used,
            infeasible,
            excluded,
        );
    }
    fs::write(config.out.join("summary.csv"), summary)?;

    // The six figure panels as bin data.
    let bins = config.bins;
    write_hist_csv(
        &config.out.join("capacity_hist.csv"),
        &methods,
        |m| m.capacity_pu.iter().copied().flatten().collect(),
        bins,
        None,
    )?;
    write_hist_csv(
        &config.out.join("gain_hist.csv"),
        &methods,
        |m| {
            m.capacity_pu
                .iter()
                .zip(&m.all_closed_pu)
                .filter_map(|(c, &closed)| c.map(|c| c - closed))
                .collect()
        },
        bins,
        None,
    )?;
    write_hist_csv(
        &config.out.join("solver_gap_hist.csv"),
        &methods,
        |m| {
            m.capacity_pu
                .iter()
                .zip(&m.solver_pu)
                .filter_map(|(c, &solver)| c.map(|c| solver - c))
                .collect()
        },
        bins,
        None,
    )?;
    write_hist_csv(
        &config.out.join("normalized_hist.csv"),
        &methods,
        |m| m.normalized.iter().copied().flatten().collect(),
        bins,
        None,
    )?;
    // Unit-width bins for openings so each bin is one opening count.
    let max_openings = methods
        .iter()
        .flat_map(|m| m.openings.iter().copied())
        .max()
        .unwrap_or(0);
    write_hist_csv(
        &config.out.join("openings_hist.csv"),
        &methods,
        |m| m.openings.iter().map(|&k| k as f64).collect(),
        max_openings + 1,
        Some((0.0, (max_openings + 1) as f64)),
    )?;
    // Per-switch usage side by side, one column per method.
    let n_switches = methods.iter().map(|m| m.usage_pct.len()).max().unwrap_or(0);
    let mut usage = String::from("# schema: usage-report-v1\nswitch");
    for m in &methods {
        usage.push(',');
        usage.push_str(&m.method);
    }
    usage.push('\n');
    for e in 0..n_switches {
        usage.push_str(&e.to_string());
        for m in &methods {
            usage.push(',');
            if let Some(pct) = m.usage_pct.get(e) {
                usage.push_str(&pct.to_string());
            }
        }
        usage.push('\n');
    }
    fs::write(config.out.join("usage_by_switch.csv"), usage)?;
    println!(
        "wrote summary.csv, five histogram CSVs, and usage_by_switch.csv to {}",
        config.out.display()
    );
    Ok(())
}

/// A three-switch grid small enough for exact enumeration, used by the
/// oracle checks below.
fn selftest_grid() -> Grid {
    use crate::grid::{Injection, Line, Switch, Zone};
    Grid::new(
        "selftest",
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

fn check(name: &str, ok: bool, detail: String) -> Result<(), CliError> {
    if ok {
        println!("ok: {name} ({detail})");
        Ok(())
    } else {
        Err(CliError::Selftest(format!("{name}: {detail}")))
    }
}

/// Runtime oracle suite: cross-checks the solvers and gradients against
/// each other on small instances, printing one line per check.
fn cmd_selftest() -> Result<(), CliError> {
    // Shipped base cases build, validate, and operate all-closed.
    for name in ["twelve", "four"] {
        let grid = load_base(name)?;
        let violations = grid.validate();
        check(
            "base case valid",
            violations.is_empty(),
            format!("{name}: {} violations", violations.len()),
        )?;
        let cap = exchange_capacity(&grid, &Decision::all_closed(grid.n_switches()))?
            .capacity_mw();
        check(
            "base case feasible all-closed",
            cap.is_some(),
            format!("{name}: capacity {:.1} MW", cap.unwrap_or(f64::NAN)),
        )?;
    }

    // Enumeration agrees with branch-and-bound run to proof.
    let grid = selftest_grid();
    let exhaustive = exhaustive_best(&grid, 2)?;
    let bnb = branch_and_bound(
        &grid,
        &BnbConfig {
            max_openings: 2,
            gap: 0.0,
            time_limit_s: f64::INFINITY,
        },
    )?;
    check(
        "branch-and-bound matches enumeration",
        (exhaustive.capacity_mw - bnb.capacity_mw).abs() < 1e-9,
        format!(
            "best {:.3} MW vs {:.3} MW over {} decisions",
            exhaustive.capacity_mw, bnb.capacity_mw, exhaustive.evaluated
        ),
    )?;

    // Exact gradient against central differences of the exact objective.
    let mut eval = ContextEval::new(&grid)?;
    let z = [0.4, -0.3, 0.2];
    let beta = 0.05;
    let grad = exact_gradient(&z, &mut eval, beta)?;
    let mut worst = 0.0f64;
    for e in 0..z.len() {
        let h = 1e-6;
        let mut zp = z;
        zp[e] += h;
        let mut zm = z;
        zm[e] -= h;
        let fd = (exact_objective(&zp, &mut eval, beta)? - exact_objective(&zm, &mut eval, beta)?)
            / (2.0 * h);
        worst = worst.max((fd - grad[e]).abs() / fd.abs().max(1e-9));
    }
    check(
        "exact gradient matches finite differences",
        worst < 1e-5,
        format!("max relative error {worst:.2e}"),
    )?;

    // Memory-target gradient identity and its fixed point.
    let y = Decision::new(vec![1, 0, 1]).expect("valid states");
    let g = grad_mt(&z, &y, 1.0)?;
    let mut worst_mt = 0.0f64;
    for e in 0..z.len() {
        let s = sigma(z[e]);
        let expect = s * (1.0 - s) * (z[e] - (2.0 * f64::from(y.states[e]) - 1.0));
        worst_mt = worst_mt.max((g[e] - expect).abs());
    }
    let fixed: Vec<f64> = y
        .states
        .iter()
        .map(|&s| 2.0 * f64::from(s) - 1.0)
        .collect();
    let g0 = grad_mt(&fixed, &y, 1.0)?;
    let fixed_norm = g0.iter().map(|v| v.abs()).fold(0.0, f64::max);
    check(
        "memory gradient identity and fixed point",
        worst_mt < 1e-12 && fixed_norm < 1e-12,
        format!("identity error {worst_mt:.2e}, fixed point norm {fixed_norm:.2e}"),
    )?;

    // Filtered scores: round minimum at -1/2 exactly, all in [-1/2, 0).
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let scores: Vec<f64> = (0..64)
        .map(|_| 500.0 * rand::Rng::gen::<f64>(&mut rng) - 250.0)
        .collect();
    let filtered = filter_scores(&scores, 20.0)?;
    let min_index = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty");
    let in_range = filtered.iter().all(|&f| (-0.5..0.0).contains(&f));
    check(
        "filtered scores anchor the round minimum",
        filtered[min_index] == -0.5 && in_range,
        format!(
            "min maps to {}, range [{:.3}, {:.3})",
            filtered[min_index],
            filtered.iter().cloned().fold(f64::INFINITY, f64::min),
            filtered.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ),
    )?;

    // Network gradients against finite differences on the small grid.
    {
        use crate::gnn::{GridInput, H2mgNodeModel, ModelConfig};
        use crate::grid::EcdfNormalizer;
        let normalizer = EcdfNormalizer::fit(std::slice::from_ref(&grid), 8);
        let input = GridInput::from_normalized(&normalizer.apply(&grid));
        let config = ModelConfig {
            latent: 4,
            hidden: vec![6],
            steps: 10,
            dt: 0.05,
        };
        let mut model = H2mgNodeModel::init(&config, &mut ChaCha8Rng::seed_from_u64(3));
        let upstream = vec![0.7, -0.4, 0.3];
        let (_, tape) = model.forward(&input);
        let grads = model.backward(&input, &tape, &upstream).flatten();
        let mut params = model.flatten_params();
        let loss = |model: &H2mgNodeModel| -> f64 {
            model
                .scores(&input)
                .iter()
                .zip(&upstream)
                .map(|(s, u)| s * u)
                .sum()
        };
        let h = 1e-6;
        let mut worst_fd = 0.0f64;
        // Spot-check a spread of parameters; the full sweep lives in
        // the test suite.
        for i in (0..params.len()).step_by(97) {
            let orig = params[i];
            params[i] = orig + h;
            model.assign_params(&params).expect("length unchanged");
            let up = loss(&model);
            params[i] = orig - h;
            model.assign_params(&params).expect("length unchanged");
            let down = loss(&model);
            params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            worst_fd = worst_fd.max((fd - grads[i]).abs() / (1e-6 + 1e-3 * fd.abs()).max(1e-6));
        }
        model.assign_params(&params).expect("length unchanged");
        check(
            "network backward matches finite differences",
            worst_fd < 1.0,
            format!("worst error ratio {worst_fd:.3} over sampled parameters"),
        )?;
    }

    println!("all checks passed");
    Ok(())
}
