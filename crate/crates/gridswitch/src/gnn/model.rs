//! The policy network: typed encoders, Euler latent dynamics, switch
//! decoders, and record-and-replay differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use super::mlp::{Mlp, MlpGrads, MlpSpec, MlpTrace};
use super::GnnError;
use crate::grid::{EcdfNormalizer, Grid};

/// Hyper-edge classes the model understands, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeClass {
    Gen,
    Load,
    Switch,
    Line,
}

impl EdgeClass {
    pub const ALL: [EdgeClass; 4] = [
        EdgeClass::Gen,
        EdgeClass::Load,
        EdgeClass::Switch,
        EdgeClass::Line,
    ];

    pub fn index(self) -> usize {
        match self {
            EdgeClass::Gen => 0,
            EdgeClass::Load => 1,
            EdgeClass::Switch => 2,
            EdgeClass::Line => 3,
        }
    }

    /// Feature channels: injections carry [power, zone-1, zone-2],
    /// switches a single constant, lines [limit, reactance,
    /// orientation, in-service].
    pub fn n_features(self) -> usize {
        match self {
            EdgeClass::Gen | EdgeClass::Load => 3,
            EdgeClass::Switch => 1,
            EdgeClass::Line => 4,
        }
    }

    pub fn n_ports(self) -> usize {
        match self {
            EdgeClass::Gen | EdgeClass::Load => 1,
            EdgeClass::Switch | EdgeClass::Line => 2,
        }
    }
}

/// Message functions exist per class and port, in this fixed order.
const MESSAGE_SLOTS: [(EdgeClass, usize); 6] = [
    (EdgeClass::Gen, 0),
    (EdgeClass::Load, 0),
    (EdgeClass::Switch, 0),
    (EdgeClass::Switch, 1),
    (EdgeClass::Line, 0),
    (EdgeClass::Line, 1),
];

fn message_index(class: EdgeClass, port: usize) -> usize {
    match (class, port) {
        (EdgeClass::Gen, 0) => 0,
        (EdgeClass::Load, 0) => 1,
        (EdgeClass::Switch, p) => 2 + p,
        (EdgeClass::Line, p) => 4 + p,
        _ => unreachable!("no message function for {class:?} port {port}"),
    }
}

/// One term of a neighborhood sum: the given edge delivers its port
/// message into `dest`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageSlot {
    pub class: EdgeClass,
    pub edge: usize,
    pub port: usize,
    pub dest: usize,
}

/// A grid flattened for the network: per-class feature rows, per-edge
/// port addresses, and the message schedule sorted so each address
/// accumulates its neighborhood in a storage-independent order.
///
/// Build it from a normalizer-scaled grid; numeric channels are
/// expected in [0,1] while binary and categorical ones pass through.
#[derive(Debug, Clone)]
pub struct GridInput {
    pub n_addresses: usize,
    features: Vec<Vec<Vec<f64>>>,
    ports: Vec<Vec<Vec<usize>>>,
    schedule: Vec<MessageSlot>,
}

impl GridInput {
    pub fn from_normalized(grid: &Grid) -> GridInput {
        let mut features: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 4];
        let mut ports: Vec<Vec<Vec<usize>>> = vec![Vec::new(); 4];
        for injection_class in [EdgeClass::Gen, EdgeClass::Load] {
            let source = match injection_class {
                EdgeClass::Gen => &grid.generators,
                _ => &grid.loads,
            };
            for inj in source {
                features[injection_class.index()].push(vec![
                    inj.p_mw,
                    f64::from(u8::from(inj.in_z1)),
                    f64::from(u8::from(inj.in_z2)),
                ]);
                ports[injection_class.index()].push(vec![inj.port]);
            }
        }
        for sw in &grid.switches {
            features[EdgeClass::Switch.index()].push(vec![1.0]);
            ports[EdgeClass::Switch.index()].push(vec![sw.from, sw.to]);
        }
        for line in &grid.lines {
            // A disconnected line keeps its place in the graph but
            // presents an all-zero face, service flag included.
            let row = if line.in_service {
                vec![line.f_bar_mw, line.x_pu, f64::from(line.s), 1.0]
            } else {
                vec![0.0; 4]
            };
            features[EdgeClass::Line.index()].push(row);
            ports[EdgeClass::Line.index()].push(vec![line.from, line.to]);
        }
        let mut schedule = Vec::new();
        for class in EdgeClass::ALL {
            for (edge, edge_ports) in ports[class.index()].iter().enumerate() {
                for (port, &dest) in edge_ports.iter().enumerate() {
                    schedule.push(MessageSlot {
                        class,
                        edge,
                        port,
                        dest,
                    });
                }
            }
        }
        // Canonical accumulation order per destination; the trailing
        // edge index only breaks ties between parallel edges on the
        // same addresses, where the picked order is immaterial.
        schedule.sort_by_key(|s| {
            let p = &ports[s.class.index()][s.edge];
            let lo = *p.iter().min().expect("edges have ports");
            let hi = *p.iter().max().expect("edges have ports");
            (s.dest, s.class.index(), lo, hi, s.port, s.edge)
        });
        GridInput {
            n_addresses: grid.n_addresses,
            features,
            ports,
            schedule,
        }
    }

    pub fn n_edges(&self, class: EdgeClass) -> usize {
        self.features[class.index()].len()
    }

    fn counts(&self) -> (usize, [usize; 4]) {
        let mut c = [0; 4];
        for class in EdgeClass::ALL {
            c[class.index()] = self.n_edges(class);
        }
        (self.n_addresses, c)
    }
}

/// Sizes and integration plan. The profiles share 20 Euler steps of
/// 0.05, so latents evolve over exactly one unit of artificial time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent: usize,
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub dt: f64,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            latent: 64,
            hidden: vec![128, 128],
            steps: 20,
            dt: 0.05,
        }
    }

    pub fn tiny() -> Self {
        ModelConfig {
            latent: 8,
            hidden: vec![16, 16],
            steps: 20,
            dt: 0.05,
        }
    }
}

/// Per-class encoders, per-(class, port) message functions, one
/// hidden-layer-free dynamics map with rectified output, and one
/// switch decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct H2mgNodeModel {
    pub config: ModelConfig,
    encoders: Vec<Mlp>,
    messages: Vec<Mlp>,
    dynamics: Mlp,
    decoder: Mlp,
}

/// Parameter gradients in the same structure as the model.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    encoders: Vec<MlpGrads>,
    messages: Vec<MlpGrads>,
    dynamics: MlpGrads,
    decoder: MlpGrads,
}

impl ModelGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.encoders {
            g.write_flat(&mut out);
        }
        for g in &self.messages {
            g.write_flat(&mut out);
        }
        self.dynamics.write_flat(&mut out);
        self.decoder.write_flat(&mut out);
        out
    }
}

/// Recorded activations of one forward pass. Only valid for a backward
/// pass over the same model and input it was recorded with.
#[derive(Debug)]
pub struct Tape {
    enc: Vec<Vec<MlpTrace>>,
    steps: Vec<StepTape>,
    dec: Vec<MlpTrace>,
    h_final: Vec<Vec<f64>>,
    counts: (usize, [usize; 4]),
}

#[derive(Debug)]
struct StepTape {
    msgs: Vec<MlpTrace>,
    squash: Vec<Vec<f64>>,
    dyn_traces: Vec<MlpTrace>,
}

impl Tape {
    /// Latents at the end of integration, one row per address.
    pub fn final_latents(&self) -> &[Vec<f64>] {
        &self.h_final
    }
}

impl H2mgNodeModel {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> Self {
        assert!(config.steps >= 1 && config.dt > 0.0, "degenerate integration plan");
        let d = config.latent;
        let encoders = EdgeClass::ALL
            .iter()
            .map(|c| Mlp::init(MlpSpec::new(c.n_features(), &config.hidden, d, false), rng))
            .collect();
        let messages = MESSAGE_SLOTS
            .iter()
            .map(|(c, _)| {
                Mlp::init(
                    MlpSpec::new(c.n_ports() * d + d, &config.hidden, d, false),
                    rng,
                )
            })
            .collect();
        let dynamics = Mlp::init(MlpSpec::new(2 * d, &[], d, true), rng);
        let decoder = Mlp::init(MlpSpec::new(3 * d, &config.hidden, 1, false), rng);
        H2mgNodeModel {
            config: config.clone(),
            encoders,
            messages,
            dynamics,
            decoder,
        }
    }

    pub fn n_params(&self) -> usize {
        self.encoders
            .iter()
            .chain(&self.messages)
            .chain([&self.dynamics, &self.decoder])
            .map(Mlp::n_params)
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for m in &self.encoders {
            m.write_flat(&mut out);
        }
        for m in &self.messages {
            m.write_flat(&mut out);
        }
        self.dynamics.write_flat(&mut out);
        self.decoder.write_flat(&mut out);
        out
    }

    pub fn assign_params(&mut self, flat: &[f64]) -> Result<(), GnnError> {
        if flat.len() != self.n_params() {
            return Err(GnnError::ParamLength {
                expected: self.n_params(),
                got: flat.len(),
            });
        }
        let mut src = flat;
        for m in &mut self.encoders {
            m.read_flat(&mut src);
        }
        for m in &mut self.messages {
            m.read_flat(&mut src);
        }
        self.dynamics.read_flat(&mut src);
        self.decoder.read_flat(&mut src);
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoders: self.encoders.iter().map(Mlp::zero_grads).collect(),
            messages: self.messages.iter().map(Mlp::zero_grads).collect(),
            dynamics: self.dynamics.zero_grads(),
            decoder: self.decoder.zero_grads(),
        }
    }

    /// Zero the decoder's output layer, pinning every score to zero.
    /// A diagnostic hook, not a training feature.
    pub fn zero_decoder_output(&mut self) {
        self.decoder.zero_output_layer();
    }

    fn message_input(
        &self,
        input: &GridInput,
        h: &[Vec<f64>],
        enc: &[Vec<MlpTrace>],
        class: EdgeClass,
        edge: usize,
    ) -> Vec<f64> {
        let d = self.config.latent;
        let ports = &input.ports[class.index()][edge];
        let mut x = Vec::with_capacity(ports.len() * d + d);
        for &addr in ports {
            x.extend_from_slice(&h[addr]);
        }
        x.extend_from_slice(enc[class.index()][edge].output());
        x
    }

    /// Scores plus the tape needed to differentiate them.
    pub fn forward(&self, input: &GridInput) -> (Vec<f64>, Tape) {
        let d = self.config.latent;
        let n = input.n_addresses;
        let enc: Vec<Vec<MlpTrace>> = EdgeClass::ALL
            .iter()
            .map(|c| {
                input.features[c.index()]
                    .iter()
                    .map(|f| self.encoders[c.index()].forward(f))
                    .collect()
            })
            .collect();
        let mut h = vec![vec![0.0; d]; n];
        let mut steps = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let mut acc = vec![vec![0.0; d]; n];
            let mut msgs = Vec::with_capacity(input.schedule.len());
            for slot in &input.schedule {
                let x = self.message_input(input, &h, &enc, slot.class, slot.edge);
                let trace = self.messages[message_index(slot.class, slot.port)].forward(&x);
                for (a, &m) in acc[slot.dest].iter_mut().zip(trace.output()) {
                    *a += m;
                }
                msgs.push(trace);
            }
            let squash: Vec<Vec<f64>> = acc
                .iter()
                .map(|row| row.iter().map(|v| v.tanh()).collect())
                .collect();
            let mut dyn_traces = Vec::with_capacity(n);
            let mut h_next = Vec::with_capacity(n);
            for a in 0..n {
                let mut f_in = h[a].clone();
                f_in.extend_from_slice(&squash[a]);
                let trace = self.dynamics.forward(&f_in);
                h_next.push(
                    h[a].iter()
                        .zip(trace.output())
                        .map(|(hv, fv)| hv + self.config.dt * fv)
                        .collect(),
                );
                dyn_traces.push(trace);
            }
            steps.push(StepTape {
                msgs,
                squash,
                dyn_traces,
            });
            h = h_next;
        }
        let n_switch = input.n_edges(EdgeClass::Switch);
        let mut z = Vec::with_capacity(n_switch);
        let mut dec = Vec::with_capacity(n_switch);
        let sw = EdgeClass::Switch.index();
        for (ports, enc_trace) in input.ports[sw].iter().zip(&enc[sw]) {
            let mut x = Vec::with_capacity(3 * d);
            x.extend_from_slice(enc_trace.output());
            x.extend_from_slice(&h[ports[0]]);
            x.extend_from_slice(&h[ports[1]]);
            let trace = self.decoder.forward(&x);
            z.push(trace.output()[0]);
            dec.push(trace);
        }
        let tape = Tape {
            enc,
            steps,
            dec,
            h_final: h,
            counts: input.counts(),
        };
        (z, tape)
    }

    /// Forward pass without keeping the tape.
    pub fn scores(&self, input: &GridInput) -> Vec<f64> {
        self.forward(input).0
    }

    /// Gradient of upstream . z with respect to every parameter.
    /// Panics when the tape was recorded on a differently shaped input;
    /// reusing a tape across inputs of identical shape is undetectable
    /// and on the caller.
    pub fn backward(&self, input: &GridInput, tape: &Tape, upstream: &[f64]) -> ModelGrads {
        assert_eq!(tape.counts, input.counts(), "tape is stale for this input");
        let n_switch = input.n_edges(EdgeClass::Switch);
        assert_eq!(upstream.len(), n_switch, "upstream width mismatch");
        let d = self.config.latent;
        let n = input.n_addresses;
        let mut grads = self.zero_grads();
        let mut grad_h = vec![vec![0.0; d]; n];
        let mut grad_enc: Vec<Vec<Vec<f64>>> = EdgeClass::ALL
            .iter()
            .map(|c| vec![vec![0.0; d]; input.n_edges(*c)])
            .collect();
        for (e, trace) in tape.dec.iter().enumerate() {
            let gin = self
                .decoder
                .backward(trace, &[upstream[e]], &mut grads.decoder);
            let ports = &input.ports[EdgeClass::Switch.index()][e];
            for i in 0..d {
                grad_enc[EdgeClass::Switch.index()][e][i] += gin[i];
                grad_h[ports[0]][i] += gin[d + i];
                grad_h[ports[1]][i] += gin[2 * d + i];
            }
        }
        for st in tape.steps.iter().rev() {
            let mut grad_h_prev = grad_h.clone();
            let mut grad_acc = Vec::with_capacity(n);
            for a in 0..n {
                let df: Vec<f64> = grad_h[a].iter().map(|g| g * self.config.dt).collect();
                let gin = self
                    .dynamics
                    .backward(&st.dyn_traces[a], &df, &mut grads.dynamics);
                for i in 0..d {
                    grad_h_prev[a][i] += gin[i];
                }
                grad_acc.push(
                    (0..d)
                        .map(|i| gin[d + i] * (1.0 - st.squash[a][i] * st.squash[a][i]))
                        .collect::<Vec<f64>>(),
                );
            }
            for (slot, trace) in input.schedule.iter().zip(&st.msgs) {
                let mi = message_index(slot.class, slot.port);
                let gin =
                    self.messages[mi].backward(trace, &grad_acc[slot.dest], &mut grads.messages[mi]);
                let ports = &input.ports[slot.class.index()][slot.edge];
                for (p, &addr) in ports.iter().enumerate() {
                    for i in 0..d {
                        grad_h_prev[addr][i] += gin[p * d + i];
                    }
                }
                let off = ports.len() * d;
                for i in 0..d {
                    grad_enc[slot.class.index()][slot.edge][i] += gin[off + i];
                }
            }
            grad_h = grad_h_prev;
        }
        for class in EdgeClass::ALL {
            let c = class.index();
            for (e, trace) in tape.enc[c].iter().enumerate() {
                self.encoders[c].backward(trace, &grad_enc[c][e], &mut grads.encoders[c]);
            }
        }
        grads
    }
}

pub const CHECKPOINT_SCHEMA: &str = "checkpoint-v1";

/// A trained model frozen with the feature normalizer it was trained
/// behind. JSON round trips are bit-exact: floats serialize via their
/// shortest uniquely-parsing decimal form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<f64>,
    pub normalizer: EcdfNormalizer,
}

impl Checkpoint {
    pub fn capture(model: &H2mgNodeModel, normalizer: &EcdfNormalizer) -> Self {
        Checkpoint {
            config: model.config.clone(),
            params: model.flatten_params(),
            normalizer: normalizer.clone(),
        }
    }

    pub fn restore(&self) -> Result<H2mgNodeModel, GnnError> {
        // The seed is irrelevant: every parameter is overwritten.
        let mut model = H2mgNodeModel::init(&self.config, &mut ChaCha8Rng::seed_from_u64(0));
        model.assign_params(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            #[serde(flatten)]
            checkpoint: &'a Checkpoint,
        }
        serde_json::to_string(&Doc {
            schema: CHECKPOINT_SCHEMA,
            checkpoint: self,
        })
        .expect("checkpoint serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Checkpoint, GnnError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            #[serde(flatten)]
            checkpoint: Checkpoint,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != CHECKPOINT_SCHEMA {
            return Err(GnnError::Schema(doc.schema));
        }
        Ok(doc.checkpoint)
    }

    pub fn save(&self, path: &Path) -> Result<(), GnnError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, GnnError> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        build_base_case, four_substation_case, sample_context, twelve_substation_case,
        NoiseConfig,
    };
    use crate::grid::{Injection, Line, Switch, Zone};

    /// Three addresses, one edge of every class, values already inside
    /// the unit interval so no normalizer is needed.
    fn small_grid() -> Grid {
        Grid::new(
            "small".to_string(),
            3,
            vec![Injection::new(0, 0.8, Zone::Z1)],
            vec![Injection::new(2, 0.9, Zone::Z2)],
            vec![Switch {
                from: 0,
                to: 1,
                substation: "s".to_string(),
            }],
            vec![Line {
                from: 1,
                to: 2,
                f_bar_mw: 0.6,
                x_pu: 0.3,
                s: 1,
                in_service: true,
            }],
        )
    }

    fn normalized_twelve() -> Grid {
        let grid = build_base_case(&twelve_substation_case()).unwrap();
        let norm = EcdfNormalizer::fit(std::slice::from_ref(&grid), 8);
        norm.apply(&grid)
    }

    #[test]
    fn zeroed_decoder_scores_everything_zero() {
        let grid = normalized_twelve();
        let input = GridInput::from_normalized(&grid);
        let mut model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(1));
        model.zero_decoder_output();
        let z = model.scores(&input);
        assert_eq!(z, vec![0.0; 57]);
    }

    #[test]
    fn forward_is_deterministic() {
        let grid = normalized_twelve();
        let input = GridInput::from_normalized(&grid);
        let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(model.scores(&input), model.scores(&input));
    }

    #[test]
    fn switch_storage_order_does_not_leak_into_scores() {
        let grid = build_base_case(&four_substation_case()).unwrap();
        let mut shuffled = grid.switches.clone();
        shuffled.rotate_left(7);
        shuffled.swap(0, 9);
        let regrid = Grid::new(
            grid.context_id.clone(),
            grid.n_addresses,
            grid.generators.clone(),
            grid.loads.clone(),
            shuffled,
            grid.lines.clone(),
        );
        let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(
            model.scores(&GridInput::from_normalized(&grid)),
            model.scores(&GridInput::from_normalized(&regrid))
        );
    }

    #[test]
    fn relabeling_addresses_permutes_scores() {
        let grid = build_base_case(&four_substation_case()).unwrap();
        let n = grid.n_addresses;
        let relabel = |a: usize| n - 1 - a;
        let permuted = Grid::new(
            grid.context_id.clone(),
            n,
            grid.generators
                .iter()
                .map(|g| Injection {
                    port: relabel(g.port),
                    ..g.clone()
                })
                .collect(),
            grid.loads
                .iter()
                .map(|l| Injection {
                    port: relabel(l.port),
                    ..l.clone()
                })
                .collect(),
            grid.switches
                .iter()
                .map(|sw| Switch {
                    from: relabel(sw.from),
                    to: relabel(sw.to),
                    substation: sw.substation.clone(),
                })
                .collect(),
            grid.lines
                .iter()
                .map(|line| Line {
                    from: relabel(line.from),
                    to: relabel(line.to),
                    ..line.clone()
                })
                .collect(),
        );
        let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(4));
        let z = model.scores(&GridInput::from_normalized(&grid));
        let z_perm = model.scores(&GridInput::from_normalized(&permuted));
        for (e, sw) in grid.switches.iter().enumerate() {
            let j = permuted
                .switches
                .iter()
                .position(|p| {
                    p.substation == sw.substation
                        && p.from == relabel(sw.from)
                        && p.to == relabel(sw.to)
                })
                .unwrap();
            assert!(
                (z[e] - z_perm[j]).abs() < 1e-5,
                "switch {e}: {} vs {}",
                z[e],
                z_perm[j]
            );
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let grid = small_grid();
        let input = GridInput::from_normalized(&grid);
        let config = ModelConfig {
            latent: 4,
            hidden: vec![6],
            steps: 20,
            dt: 0.05,
        };
        let upstream = [0.7];
        for seed in [10, 11, 12] {
            let mut model = H2mgNodeModel::init(&config, &mut ChaCha8Rng::seed_from_u64(seed));
            let (_, tape) = model.forward(&input);
            let grads = model.backward(&input, &tape, &upstream).flatten();
            let params = model.flatten_params();
            // Small enough that central differences rarely straddle a
            // rectifier kink, large enough to stay above roundoff.
            let h = 1e-6;
            for i in 0..params.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                plus[i] += h;
                minus[i] -= h;
                model.assign_params(&plus).unwrap();
                let up = model.scores(&input)[0] * upstream[0];
                model.assign_params(&minus).unwrap();
                let down = model.scores(&input)[0] * upstream[0];
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grads[i]).abs() < 1e-6 + 1e-3 * fd.abs(),
                    "seed {seed}, param {i}: fd {fd}, grad {}",
                    grads[i]
                );
            }
            model.assign_params(&params).unwrap();
        }
    }

    #[test]
    fn backward_is_linear_in_the_upstream() {
        let grid = small_grid();
        let input = GridInput::from_normalized(&grid);
        let model = H2mgNodeModel::init(
            &ModelConfig {
                latent: 4,
                hidden: vec![6],
                steps: 20,
                dt: 0.05,
            },
            &mut ChaCha8Rng::seed_from_u64(13),
        );
        let (_, tape) = model.forward(&input);
        let zero = model.backward(&input, &tape, &[0.0]).flatten();
        assert!(zero.iter().all(|&g| g == 0.0));
        let g1 = model.backward(&input, &tape, &[0.3]).flatten();
        let g2 = model.backward(&input, &tape, &[0.6]).flatten();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn latents_stay_bounded_on_generated_grids() {
        let base = build_base_case(&twelve_substation_case()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut grids = vec![base.clone()];
        for _ in 0..5 {
            grids.push(sample_context(&base, &NoiseConfig::default(), &mut rng).unwrap());
        }
        let norm = EcdfNormalizer::fit(&grids, 16);
        for config in [ModelConfig::full(), ModelConfig::tiny()] {
            let model = H2mgNodeModel::init(&config, &mut ChaCha8Rng::seed_from_u64(15));
            for g in &grids {
                let input = GridInput::from_normalized(&norm.apply(g));
                let (_, tape) = model.forward(&input);
                let sup = tape
                    .final_latents()
                    .iter()
                    .flatten()
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                assert!(sup < 1e3, "latent sup {sup} under {config:?}");
            }
        }
    }

    #[test]
    fn checkpoints_round_trip_bit_exact() {
        let base = build_base_case(&four_substation_case()).unwrap();
        let norm = EcdfNormalizer::fit(std::slice::from_ref(&base), 8);
        let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(16));
        let ckpt = Checkpoint::capture(&model, &norm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.restore().unwrap();
        assert_eq!(restored.flatten_params(), model.flatten_params());
        let input = GridInput::from_normalized(&norm.apply(&base));
        assert_eq!(restored.scores(&input), model.scores(&input));
        let mangled = ckpt.to_json().replace(CHECKPOINT_SCHEMA, "checkpoint-v0");
        assert!(matches!(
            Checkpoint::from_json(&mangled).unwrap_err(),
            GnnError::Schema(_)
        ));
    }

    #[test]
    fn parameter_vectors_round_trip_through_the_flat_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = H2mgNodeModel::init(&ModelConfig::tiny(), &mut rng);
        let flat = model.flatten_params();
        assert_eq!(flat.len(), model.n_params());
        let mut other = H2mgNodeModel::init(&ModelConfig::tiny(), &mut rng);
        assert_ne!(other.flatten_params(), flat);
        other.assign_params(&flat).unwrap();
        assert_eq!(other, model);
        assert!(matches!(
            other.assign_params(&flat[1..]).unwrap_err(),
            GnnError::ParamLength { .. }
        ));
    }
}
