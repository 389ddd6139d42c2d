// Scratch measurement harness for tuning the shipped base cases.

use gridswitch::datagen::*;
use gridswitch::exact::*;
use gridswitch::gnn::{GridInput, H2mgNodeModel, ModelConfig};
use gridswitch::grid::*;
use gridswitch::lp::*;
use gridswitch::surrogate::{most_probable_decision, ContextEval};
use gridswitch::train::{train, Profile, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn probe(name: &str, base: &Grid, n: usize, max_openings: usize) {
    let noise = NoiseConfig::default();
    let mut feasible = 0usize;
    let mut improved = 0usize;
    let mut gains = Vec::new();
    let mut caps = Vec::new();
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        rng.set_stream(i as u64);
        let g = sample_context(base, &noise, &mut rng).unwrap();
        let all_closed = Decision::all_closed(g.n_switches());
        let base_cap = match exchange_capacity(&g, &all_closed).unwrap() {
            Exchange::Feasible(r) => r.capacity_mw,
            Exchange::Infeasible => continue,
        };
        feasible += 1;
        caps.push(base_cap);
        let best_cap = if g.n_switches() <= ENUMERATION_LIMIT {
            exhaustive_best(&g, max_openings).unwrap().capacity_mw
        } else {
            // Single-opening scan for grids too large to enumerate.
            assert_eq!(max_openings, 1);
            let mut best = base_cap;
            for e in 0..g.n_switches() {
                let mut states = all_closed.states.clone();
                states[e] = 0;
                if let Exchange::Feasible(r) =
                    exchange_capacity(&g, &Decision { states }).unwrap()
                {
                    best = best.max(r.capacity_mw);
                }
            }
            best
        };
        if best_cap > base_cap + 1e-6 {
            improved += 1;
            gains.push(best_cap - base_cap);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    println!(
        "{name}: n={n} feasible={feasible} ({:.0}%) improved={improved} ({:.0}% of feasible) \
         mean_cap={:.1} mean_gain={:.1} max_gain={:.1}",
        100.0 * feasible as f64 / n as f64,
        100.0 * improved as f64 / feasible.max(1) as f64,
        mean(&caps),
        mean(&gains),
        gains.iter().cloned().fold(0.0, f64::max),
    );
}

fn main() {
    let twelve = build_base_case(&twelve_substation_case()).unwrap();
    let four = build_base_case(&four_substation_case()).unwrap();

    // Base-case capacities, no noise.
    for (name, g) in [("twelve", &twelve), ("four", &four)] {
        let d = Decision::all_closed(g.n_switches());
        match exchange_capacity(g, &d).unwrap() {
            Exchange::Feasible(r) => println!(
                "{name} base: capacity {:.1} MW (lambda {:.3} mu {:.3})",
                r.capacity_mw, r.lambda, r.mu
            ),
            Exchange::Infeasible => println!("{name} base: infeasible"),
        }
    }

    probe("four / 1 opening", &four, 100, 1);
    probe("four / 3 openings", &four, 100, 3);
    probe("twelve / 1 opening", &twelve, 100, 1);

    // Untrained network end to end: scores, mode decision, its value.
    let norm = EcdfNormalizer::fit(std::slice::from_ref(&twelve), 16);
    let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(7));
    let z = model.scores(&GridInput::from_normalized(&norm.apply(&twelve)));
    let mode = most_probable_decision(&z);
    let mut eval = ContextEval::new(&twelve).unwrap();
    println!(
        "twelve gnn: {} scores in [{:.3}, {:.3}], mode opens {} switches, f {:.1} MW \
         (all-closed {:.1} MW)",
        z.len(),
        z.iter().cloned().fold(f64::INFINITY, f64::min),
        z.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mode.openings(),
        eval.score(&mode).unwrap(),
        eval.all_closed_mw(),
    );

    // Short training run on sampled four-substation contexts.
    let sample_set = |streams: std::ops::Range<u64>| -> Vec<Grid> {
        streams
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(4242);
                rng.set_stream(1000 + s);
                let mut g = sample_context(&four, &NoiseConfig::default(), &mut rng).unwrap();
                g.context_id = format!("ctx-{s}");
                g
            })
            .filter(|g| ContextEval::new(g).is_ok())
            .collect()
    };
    let train_set = sample_set(0..8);
    let validation_set = sample_set(8..12);
    let mut config = TrainConfig::mt("unused", "unused");
    config.profile = Profile::Tiny;
    config.max_iterations = 200;
    config.validation_period = 50;
    config.n_samples = 8;
    config.minibatch = 4;
    let closed_mean = validation_set
        .iter()
        .map(|g| -ContextEval::new(g).unwrap().all_closed_mw())
        .sum::<f64>()
        / validation_set.len() as f64;
    let outcome = train(&config, &train_set, &validation_set, None).unwrap();
    println!(
        "four mt-train: {} train / {} validation contexts, {} iters, \
         best validation {:.1} MW (all-closed mean {:.1} MW), memory {} contexts",
        train_set.len(),
        validation_set.len(),
        outcome.log.len(),
        outcome.best_validation_mw,
        closed_mean,
        outcome.memory.unwrap().len(),
    );
}
