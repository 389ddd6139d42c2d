//! Base-case construction and randomized context sampling.
//!
//! A base case is a data file: a list of substations (each an instance of
//! a small switch template), a list of inter-substation lines, and one
//! thermal limit per line group (zone-1 internal, zone-2 internal,
//! boundary). `build_base_case` instantiates it into a [`Grid`];
//! `sample_context` perturbs injections and limits and knocks out lines;
//! `generate_dataset` writes a reproducible, checksummed collection of
//! sampled contexts to disk.
//!
//! Every random quantity is drawn from a caller-supplied RNG in a fixed,
//! documented order, so a dataset is a pure function of (base case, noise
//! config, seed).

use crate::grid::{bus_partition, Decision, Grid, Injection, Line, Switch, Zone};
use crate::lp::{exchange_capacity, ExchangeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Schema tag for base-case description files.
pub const CASE_SCHEMA: &str = "case-v1";
/// Schema tag for dataset manifests.
pub const DATASET_SCHEMA: &str = "dataset-v1";
/// A guarded draw gives up after this many attempts at a positive value.
pub const REDRAW_LIMIT: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("duplicate substation id {0:?}")]
    DuplicateSubstation(String),
    #[error("line references unknown substation {0:?}")]
    UnknownSubstation(String),
    #[error("case instantiates to an invalid grid: {0}")]
    InvalidCase(String),
    #[error("line {0} is internal but its zone cannot be determined")]
    UngroupableLine(usize),
    #[error("base grid has no positive {class} total in {zone:?}")]
    MissingClassTotal { class: &'static str, zone: Zone },
    #[error("{quantity} stayed non-positive after {REDRAW_LIMIT} draws")]
    RedrawLimit { quantity: String },
    #[error("local {0} draws summed to a non-positive value")]
    DegenerateLocalSum(&'static str),
    #[error("context {context_id}: {source}")]
    Exchange {
        context_id: String,
        source: ExchangeError,
    },
    #[error("dataset file {0} does not match its manifest checksum")]
    ChecksumMismatch(String),
    #[error("dataset file {file} carries context {found:?}, manifest says {expected:?}")]
    ContextMismatch {
        file: String,
        expected: String,
        found: String,
    },
    #[error("unsupported schema tag {0:?}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Grid(#[from] crate::grid::GridFileError),
}

// ---------------------------------------------------------------------------
// Substation templates
// ---------------------------------------------------------------------------

/// Internal switch arrangement of a substation. Local node indices 0 and 1
/// are the bay terminals where external objects (lines, generators,
/// loads) plug in; the remaining nodes are busbar sections.
///
/// `SectionedBar`: one busbar split into two sections joined through a
/// tie point, one bay terminal per section. Opening either coupler
/// switch splits the substation in two with a single action.
///
/// `DoubleBar`: two busbars, each bay terminal carries a selector switch
/// to both bars, plus a bar coupler. Every single opening leaves the
/// substation fully connected; splitting it takes a coordinated pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SectionedBar,
    DoubleBar,
}

impl TemplateKind {
    /// Local nodes: terminals first, then busbar sections.
    pub fn node_count(self) -> usize {
        match self {
            TemplateKind::SectionedBar => 5,
            TemplateKind::DoubleBar => 4,
        }
    }

    /// Internal switches as pairs of local node indices, already in the
    /// canonical (from, to) order used by `Grid`.
    pub fn switch_pairs(self) -> &'static [(usize, usize)] {
        match self {
            // 0, 1 terminals; 2, 4 bar sections; 3 the tie point.
            TemplateKind::SectionedBar => &[(0, 2), (1, 4), (2, 3), (3, 4)],
            // 0, 1 terminals; 2, 3 the two bars.
            TemplateKind::DoubleBar => &[(0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
        }
    }

    pub fn switch_count(self) -> usize {
        self.switch_pairs().len()
    }

    /// Terminals that external attachments cycle through.
    pub fn terminals(self) -> &'static [usize] {
        &[0, 1]
    }
}

// ---------------------------------------------------------------------------
// Base-case description
// ---------------------------------------------------------------------------

/// One substation of a base case: a template instance in a zone, plus the
/// nominal injections plugged into its terminals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstationSpec {
    pub id: String,
    pub kind: TemplateKind,
    pub zone: Zone,
    #[serde(default)]
    pub gens_mw: Vec<f64>,
    #[serde(default)]
    pub loads_mw: Vec<f64>,
}

/// Inter-substation line. Orientation and thermal limit are derived from
/// the endpoint zones, so the file only names the substations and the
/// reactance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from_sub: String,
    pub to_sub: String,
    pub x_pu: f64,
}

/// Complete description of a base case, serializable as a standalone
/// file. Thermal limits are given per line group, not per line: all
/// zone-1 internal lines share `f_bar_z1_mw`, and so on.
///
/// Attachment rule: each substation hands out its terminals round-robin,
/// in this order: its generators (file order), its loads (file order),
/// then every line endpoint touching it (file order of the line list).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseCaseSpec {
    pub name: String,
    pub f_bar_z1_mw: f64,
    pub f_bar_z2_mw: f64,
    pub f_bar_border_mw: f64,
    pub substations: Vec<SubstationSpec>,
    pub lines: Vec<LineSpec>,
}

impl BaseCaseSpec {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            #[serde(flatten)]
            spec: &'a BaseCaseSpec,
        }
        serde_json::to_string_pretty(&Doc {
            schema: CASE_SCHEMA,
            spec: self,
        })
        .expect("case serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<BaseCaseSpec, DatagenError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            #[serde(flatten)]
            spec: BaseCaseSpec,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != CASE_SCHEMA {
            return Err(DatagenError::Schema(doc.schema));
        }
        Ok(doc.spec)
    }
}

/// Twelve-substation reference case: two six-substation rings (zone 1:
/// a..f, zone 2: g..l) joined by four boundary lines. Substations b, c
/// and j use the sectioned-bar template, the other nine the double-bar
/// template, for 57 switches total. Injection values and the uniform
/// 0.05 p.u. reactance are documented placeholders; the sampling noise
/// model, not these numbers, carries the dataset's variability.
pub fn twelve_substation_case() -> BaseCaseSpec {
    BaseCaseSpec::from_json(include_str!("../cases/twelve_sub.json"))
        .expect("embedded case file is valid")
}

/// Four-substation case, small enough for exhaustive enumeration at
/// moderate opening budgets. Used by fast tests and examples.
pub fn four_substation_case() -> BaseCaseSpec {
    BaseCaseSpec::from_json(include_str!("../cases/four_sub.json"))
        .expect("embedded case file is valid")
}

/// Instantiates a base-case description into a grid. Substations claim
/// address blocks in file order; switch order is the canonical grid
/// order. Boundary lines are normalized so their from side lies in
/// zone 1 and `s = +1`.
pub fn build_base_case(spec: &BaseCaseSpec) -> Result<Grid, DatagenError> {
    let mut offset = BTreeMap::new();
    let mut next = 0usize;
    for sub in &spec.substations {
        if offset.insert(sub.id.clone(), next).is_some() {
            return Err(DatagenError::DuplicateSubstation(sub.id.clone()));
        }
        next += sub.kind.node_count();
    }

    // Round-robin terminal assignment, one cursor per substation.
    let mut cursor: BTreeMap<String, usize> = BTreeMap::new();
    fn attach(sub: &SubstationSpec, base: usize, cursor: &mut BTreeMap<String, usize>) -> usize {
        let terms = sub.kind.terminals();
        let c = cursor.entry(sub.id.clone()).or_insert(0);
        let addr = base + terms[*c % terms.len()];
        *c += 1;
        addr
    }

    let mut generators = Vec::new();
    let mut loads = Vec::new();
    let mut switches = Vec::new();
    for sub in &spec.substations {
        let base = offset[&sub.id];
        for &(a, b) in sub.kind.switch_pairs() {
            switches.push(Switch {
                from: base + a,
                to: base + b,
                substation: sub.id.clone(),
            });
        }
        for &p in &sub.gens_mw {
            let addr = attach(sub, base, &mut cursor);
            generators.push(Injection::new(addr, p, sub.zone));
        }
        for &p in &sub.loads_mw {
            let addr = attach(sub, base, &mut cursor);
            loads.push(Injection::new(addr, p, sub.zone));
        }
    }

    let by_id: BTreeMap<&str, &SubstationSpec> =
        spec.substations.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut lines = Vec::new();
    for ls in &spec.lines {
        let from_sub = *by_id
            .get(ls.from_sub.as_str())
            .ok_or_else(|| DatagenError::UnknownSubstation(ls.from_sub.clone()))?;
        let to_sub = *by_id
            .get(ls.to_sub.as_str())
            .ok_or_else(|| DatagenError::UnknownSubstation(ls.to_sub.clone()))?;
        let mut from = attach(from_sub, offset[&from_sub.id], &mut cursor);
        let mut to = attach(to_sub, offset[&to_sub.id], &mut cursor);
        let (s, f_bar_mw) = match (from_sub.zone, to_sub.zone) {
            (Zone::Z1, Zone::Z1) => (0, spec.f_bar_z1_mw),
            (Zone::Z2, Zone::Z2) => (0, spec.f_bar_z2_mw),
            (Zone::Z1, Zone::Z2) => (1, spec.f_bar_border_mw),
            (Zone::Z2, Zone::Z1) => {
                std::mem::swap(&mut from, &mut to);
                (1, spec.f_bar_border_mw)
            }
        };
        lines.push(Line {
            from,
            to,
            f_bar_mw,
            x_pu: ls.x_pu,
            s,
            in_service: true,
        });
    }

    let grid = Grid::new(spec.name.clone(), next, generators, loads, switches, lines);
    let violations = grid.validate();
    if !violations.is_empty() {
        let text = violations
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DatagenError::InvalidCase(text));
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Line groups
// ---------------------------------------------------------------------------

/// Thermal-limit group of a line. All lines of one group share a single
/// sampled limit per context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineGroup {
    Zone1,
    Zone2,
    Border,
}

/// Classifies every line of a grid. Boundary lines are recognized by
/// their orientation flag; internal lines inherit the zone of the
/// connected component they live in (components taken over all switches
/// and internal lines, zone read off the injections in the component).
pub fn line_groups(grid: &Grid) -> Result<Vec<LineGroup>, DatagenError> {
    let part = bus_partition(grid, &Decision::all_closed(grid.n_switches()));
    // Merge components across internal lines so a ring with one injection
    // still gets a zone everywhere.
    let mut comp: Vec<usize> = (0..part.n_buses).collect();
    fn root(comp: &mut [usize], mut a: usize) -> usize {
        while comp[a] != a {
            comp[a] = comp[comp[a]];
            a = comp[a];
        }
        a
    }
    for line in grid.lines.iter().filter(|l| l.s == 0) {
        let (a, b) = (
            root(&mut comp, part.bus_of[line.from]),
            root(&mut comp, part.bus_of[line.to]),
        );
        comp[a] = b;
    }
    let mut zone_of: Vec<Option<Zone>> = vec![None; part.n_buses];
    let mut conflict = vec![false; part.n_buses];
    for inj in grid.generators.iter().chain(&grid.loads) {
        let r = root(&mut comp, part.bus_of[inj.port]);
        match (zone_of[r], inj.zone()) {
            (_, None) => conflict[r] = true,
            (None, z) => zone_of[r] = z,
            (Some(a), Some(b)) if a != b => conflict[r] = true,
            _ => {}
        }
    }
    grid.lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            if line.s != 0 {
                return Ok(LineGroup::Border);
            }
            let r = root(&mut comp, part.bus_of[line.from]);
            match (zone_of[r], conflict[r]) {
                (Some(Zone::Z1), false) => Ok(LineGroup::Zone1),
                (Some(Zone::Z2), false) => Ok(LineGroup::Zone2),
                _ => Err(DatagenError::UngroupableLine(i)),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Noise model
// ---------------------------------------------------------------------------

/// Parameters of the context sampler. Sigmas are in MW; the two
/// probabilities select how many lines get knocked out per context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub sigma_local_mw: f64,
    pub sigma_zone_mw: f64,
    pub sigma_total_mw: f64,
    pub sigma_limit_mw: f64,
    pub p_one_line: f64,
    pub p_two_lines: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_local_mw: 50.0,
            sigma_zone_mw: 200.0,
            sigma_total_mw: 500.0,
            sigma_limit_mw: 50.0,
            p_one_line: 0.6,
            p_two_lines: 0.1,
        }
    }
}

impl NoiseConfig {
    /// A config with every perturbation switched off; sampling with it
    /// reproduces the base case exactly.
    pub fn zeroed() -> Self {
        NoiseConfig {
            sigma_local_mw: 0.0,
            sigma_zone_mw: 0.0,
            sigma_total_mw: 0.0,
            sigma_limit_mw: 0.0,
            p_one_line: 0.0,
            p_two_lines: 0.0,
        }
    }

    pub fn check(&self) -> Result<(), DatagenError> {
        let sigmas = [
            self.sigma_local_mw,
            self.sigma_zone_mw,
            self.sigma_total_mw,
            self.sigma_limit_mw,
        ];
        if sigmas.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(DatagenError::InvalidCase("sigmas must be >= 0".into()));
        }
        let (p1, p2) = (self.p_one_line, self.p_two_lines);
        if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) || p1 + p2 > 1.0 {
            return Err(DatagenError::InvalidCase(
                "outage probabilities must be in [0, 1] and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

fn normal<R: Rng>(rng: &mut R, mean: f64, sigma: f64) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    mean + sigma * n
}

fn positive_draw<R: Rng>(
    rng: &mut R,
    mean: f64,
    sigma: f64,
    quantity: &str,
) -> Result<f64, DatagenError> {
    for _ in 0..REDRAW_LIMIT {
        let v = normal(rng, mean, sigma);
        if v > 0.0 {
            return Ok(v);
        }
    }
    Err(DatagenError::RedrawLimit {
        quantity: quantity.to_string(),
    })
}

/// Draws perturbed powers for one injection class. Three independent
/// factors: a local draw per element, one per zone, one for the class
/// total; the element keeps its local share of the zone, the zone its
/// share of the total. The product is grouped as
/// `local * (zone / local_sum) * (total / zone_sum)` so that with all
/// sigmas at zero both ratios are exactly 1 and every power reproduces
/// its base value bit for bit.
fn scaled_powers<R: Rng>(
    rng: &mut R,
    elements: &[Injection],
    noise: &NoiseConfig,
    class: &'static str,
) -> Result<Vec<f64>, DatagenError> {
    let zone_mean = |zone: Zone| -> f64 {
        elements
            .iter()
            .filter(|e| e.zone() == Some(zone))
            .map(|e| e.p_mw)
            .sum()
    };
    let (mean_1, mean_2) = (zone_mean(Zone::Z1), zone_mean(Zone::Z2));
    for (zone, mean) in [(Zone::Z1, mean_1), (Zone::Z2, mean_2)] {
        if mean <= 0.0 {
            return Err(DatagenError::MissingClassTotal { class, zone });
        }
    }

    let locals: Vec<f64> = elements
        .iter()
        .map(|e| normal(rng, e.p_mw, noise.sigma_local_mw))
        .collect();
    let local_sum = |zone: Zone| -> f64 {
        elements
            .iter()
            .zip(&locals)
            .filter(|(e, _)| e.zone() == Some(zone))
            .map(|(_, v)| v)
            .sum()
    };
    let (sum_1, sum_2) = (local_sum(Zone::Z1), local_sum(Zone::Z2));
    if sum_1 <= 0.0 || sum_2 <= 0.0 {
        // A zone's local draws cancelling out entirely means the shares
        // are meaningless; at sane sigmas this is astronomically rare.
        return Err(DatagenError::DegenerateLocalSum(class));
    }

    let eps_1 = positive_draw(rng, mean_1, noise.sigma_zone_mw, &format!("{class} zone 1"))?;
    let eps_2 = positive_draw(rng, mean_2, noise.sigma_zone_mw, &format!("{class} zone 2"))?;
    let eps_t = positive_draw(rng, mean_1 + mean_2, noise.sigma_total_mw, &format!("{class} total"))?;

    let total_ratio = eps_t / (eps_1 + eps_2);
    Ok(elements
        .iter()
        .zip(&locals)
        .map(|(e, &local)| match e.zone() {
            Some(Zone::Z1) => local * (eps_1 / sum_1) * total_ratio,
            _ => local * (eps_2 / sum_2) * total_ratio,
        })
        .collect())
}

/// Samples one operating context around a base grid.
///
/// Draw order, fixed for reproducibility: generator locals, generator
/// zone-1/zone-2/total draws, the same four stages for loads, one
/// thermal-limit draw per non-empty line group (zone 1, zone 2,
/// boundary), the outage count, the outage line picks. Zone, total and
/// limit draws are redrawn while non-positive (at most [`REDRAW_LIMIT`]
/// attempts); local draws may go negative.
///
/// The returned grid keeps the base `context_id`; callers that archive
/// contexts rename them.
pub fn sample_context<R: Rng>(
    base: &Grid,
    noise: &NoiseConfig,
    rng: &mut R,
) -> Result<Grid, DatagenError> {
    noise.check()?;
    let groups = line_groups(base)?;
    let mut grid = base.clone();

    let gen_p = scaled_powers(rng, &base.generators, noise, "generation")?;
    for (g, p) in grid.generators.iter_mut().zip(gen_p) {
        g.p_mw = p;
    }
    let load_p = scaled_powers(rng, &base.loads, noise, "load")?;
    for (l, p) in grid.loads.iter_mut().zip(load_p) {
        l.p_mw = p;
    }

    for (group, name) in [
        (LineGroup::Zone1, "zone 1 limit"),
        (LineGroup::Zone2, "zone 2 limit"),
        (LineGroup::Border, "boundary limit"),
    ] {
        let members: Vec<usize> = (0..base.lines.len())
            .filter(|&i| groups[i] == group)
            .collect();
        let Some(&first) = members.first() else { continue };
        let f_bar = positive_draw(rng, base.lines[first].f_bar_mw, noise.sigma_limit_mw, name)?;
        for i in members {
            grid.lines[i].f_bar_mw = f_bar;
        }
    }

    let candidates: Vec<usize> = (0..grid.lines.len())
        .filter(|&i| grid.lines[i].in_service)
        .collect();
    let u: f64 = rng.gen();
    let outages = if u < noise.p_one_line {
        1
    } else if u < noise.p_one_line + noise.p_two_lines {
        2
    } else {
        0
    };
    let outages = outages.min(candidates.len());
    if outages >= 1 {
        let first = rng.gen_range(0..candidates.len());
        grid.lines[candidates[first]].in_service = false;
        if outages == 2 {
            let mut second = rng.gen_range(0..candidates.len() - 1);
            if second >= first {
                second += 1;
            }
            grid.lines[candidates[second]].in_service = false;
        }
    }

    debug_assert!(grid.validate().is_empty());
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// One archived context inside a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub context_id: String,
    pub sha256: String,
    /// Whether the exchange LP is feasible with every switch closed.
    /// Consumers that need a reference capacity can skip flagged
    /// contexts without re-solving anything.
    pub all_closed_feasible: bool,
}

/// Index of a generated dataset: everything needed to verify and reload
/// it, and to regenerate it from scratch. Contains no timestamps, so
/// regeneration reproduces the manifest byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub base_context: String,
    pub seed: u64,
    pub n: usize,
    pub noise: NoiseConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            #[serde(flatten)]
            manifest: &'a Manifest,
        }
        serde_json::to_string_pretty(&Doc {
            schema: DATASET_SCHEMA,
            manifest: self,
        })
        .expect("manifest serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Manifest, DatagenError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            #[serde(flatten)]
            manifest: Manifest,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != DATASET_SCHEMA {
            return Err(DatagenError::Schema(doc.schema));
        }
        Ok(doc.manifest)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    use std::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

/// Samples `n` contexts and writes them plus a manifest into `out_dir`.
///
/// Context `i` is drawn from an RNG stream derived from `(seed, i)`, so
/// the dataset is reproducible and contexts can be sampled in parallel
/// without any draw-order coupling between them. Each context is solved
/// once with all switches closed to record its feasibility flag.
pub fn generate_dataset(
    base: &Grid,
    noise: &NoiseConfig,
    n: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest, DatagenError> {
    noise.check()?;
    std::fs::create_dir_all(out_dir)?;
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut grid = sample_context(base, noise, &mut rng)?;
            grid.context_id = format!("ctx-{seed}-{i:06}");
            let all_closed = Decision::all_closed(grid.n_switches());
            let feasible = exchange_capacity(&grid, &all_closed)
                .map_err(|source| DatagenError::Exchange {
                    context_id: grid.context_id.clone(),
                    source,
                })?
                .is_feasible();
            let json = grid.to_json();
            let file = format!("{}.json", grid.context_id);
            std::fs::write(out_dir.join(&file), &json)?;
            Ok(ManifestEntry {
                file,
                context_id: grid.context_id,
                sha256: sha256_hex(json.as_bytes()),
                all_closed_feasible: feasible,
            })
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    let manifest = Manifest {
        base_context: base.context_id.clone(),
        seed,
        n,
        noise: noise.clone(),
        entries,
    };
    std::fs::write(out_dir.join("manifest.json"), manifest.to_json())?;
    Ok(manifest)
}

/// Reads a dataset back, verifying every checksum and context id against
/// the manifest. Grids come back in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Grid>), DatagenError> {
    let manifest = Manifest::from_json(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut grids = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let text = std::fs::read_to_string(dir.join(&entry.file))?;
        if sha256_hex(text.as_bytes()) != entry.sha256 {
            return Err(DatagenError::ChecksumMismatch(entry.file.clone()));
        }
        let grid = Grid::from_json(&text)?;
        if grid.context_id != entry.context_id {
            return Err(DatagenError::ContextMismatch {
                file: entry.file.clone(),
                expected: entry.context_id.clone(),
                found: grid.context_id,
            });
        }
        grids.push(grid);
    }
    Ok((manifest, grids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_case() -> BaseCaseSpec {
        BaseCaseSpec {
            name: "tiny".into(),
            f_bar_z1_mw: 250.0,
            f_bar_z2_mw: 250.0,
            f_bar_border_mw: 180.0,
            substations: vec![
                SubstationSpec {
                    id: "p".into(),
                    kind: TemplateKind::SectionedBar,
                    zone: Zone::Z1,
                    gens_mw: vec![300.0],
                    loads_mw: vec![100.0],
                },
                SubstationSpec {
                    id: "q".into(),
                    kind: TemplateKind::DoubleBar,
                    zone: Zone::Z2,
                    gens_mw: vec![50.0],
                    loads_mw: vec![200.0],
                },
            ],
            lines: vec![LineSpec {
                from_sub: "q".into(),
                to_sub: "p".into(),
                x_pu: 0.05,
            }],
        }
    }

    #[test]
    fn twelve_substation_case_instantiates() {
        let spec = twelve_substation_case();
        let g = build_base_case(&spec).unwrap();
        assert_eq!(spec.substations.len(), 12);
        assert_eq!(g.n_switches(), 57);
        assert_eq!(g.n_addresses, 51);
        assert_eq!(g.lines.len(), 16);
        assert!(g.validate().is_empty());
        let groups = line_groups(&g).unwrap();
        let count = |want: LineGroup| groups.iter().filter(|&&x| x == want).count();
        assert_eq!(count(LineGroup::Zone1), 6);
        assert_eq!(count(LineGroup::Zone2), 6);
        assert_eq!(count(LineGroup::Border), 4);
    }

    #[test]
    fn four_substation_case_instantiates() {
        let g = build_base_case(&four_substation_case()).unwrap();
        assert_eq!(g.n_switches(), 18);
        assert_eq!(g.lines.len(), 6);
        assert!(g.validate().is_empty());
    }

    #[test]
    fn single_substation_switch_count_matches_template() {
        let mut spec = tiny_case();
        spec.substations.truncate(1);
        spec.lines.clear();
        let g = build_base_case(&spec).unwrap();
        assert_eq!(g.n_switches(), TemplateKind::SectionedBar.switch_count());
        assert_eq!(g.n_addresses, 5);
    }

    #[test]
    fn line_to_unknown_substation_is_rejected() {
        let mut spec = tiny_case();
        spec.lines[0].to_sub = "nowhere".into();
        match build_base_case(&spec) {
            Err(DatagenError::UnknownSubstation(id)) => assert_eq!(id, "nowhere"),
            other => panic!("expected unknown-substation error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_substation_is_rejected() {
        let mut spec = tiny_case();
        let clone = spec.substations[0].clone();
        spec.substations.push(clone);
        assert!(matches!(
            build_base_case(&spec),
            Err(DatagenError::DuplicateSubstation(_))
        ));
    }

    #[test]
    fn boundary_line_is_normalized_to_zone_1_from_side() {
        // The tiny case lists its boundary line from q (zone 2) to p.
        let g = build_base_case(&tiny_case()).unwrap();
        let line = &g.lines[0];
        assert_eq!(line.s, 1);
        // p occupies addresses 0..5, q 5..9; the from side must be p's.
        assert!(line.from < 5, "from side should sit in zone 1");
        assert!(line.to >= 5);
        assert_eq!(line.f_bar_mw, 180.0);
    }

    #[test]
    fn attachments_cycle_through_terminals() {
        let g = build_base_case(&tiny_case()).unwrap();
        // Substation p: gen at terminal 0, load at terminal 1, line
        // endpoint back at terminal 0.
        assert_eq!(g.generators[0].port, 0);
        assert_eq!(g.loads[0].port, 1);
        assert_eq!(g.lines[0].from, 0);
        // Substation q (base 5): gen terminal 5, load terminal 6, line
        // endpoint terminal 5.
        assert_eq!(g.generators[1].port, 5);
        assert_eq!(g.loads[1].port, 6);
        assert_eq!(g.lines[0].to, 5);
    }

    #[test]
    fn case_file_round_trip() {
        let spec = tiny_case();
        let back = BaseCaseSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, back);
    }

    #[test]
    fn zero_noise_reproduces_the_base_bit_for_bit() {
        let base = build_base_case(&twelve_substation_case()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let sampled = sample_context(&base, &NoiseConfig::zeroed(), &mut rng).unwrap();
        assert_eq!(sampled, base);
    }

    #[test]
    fn sampled_limits_are_uniform_within_groups() {
        let base = build_base_case(&twelve_substation_case()).unwrap();
        let groups = line_groups(&base).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = sample_context(&base, &NoiseConfig::default(), &mut rng).unwrap();
        for want in [LineGroup::Zone1, LineGroup::Zone2, LineGroup::Border] {
            let limits: Vec<f64> = g
                .lines
                .iter()
                .zip(&groups)
                .filter(|(_, &grp)| grp == want)
                .map(|(l, _)| l.f_bar_mw)
                .collect();
            assert!(limits.windows(2).all(|w| w[0] == w[1]), "{want:?}: {limits:?}");
        }
    }

    #[test]
    fn outage_frequencies_match_their_probabilities() {
        let base = build_base_case(&twelve_substation_case()).unwrap();
        let noise = NoiseConfig::default();
        let (mut one, mut two) = (0usize, 0usize);
        let samples = 10_000;
        for i in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(2024);
            rng.set_stream(i);
            let g = sample_context(&base, &noise, &mut rng).unwrap();
            match g.lines.iter().filter(|l| !l.in_service).count() {
                1 => one += 1,
                2 => two += 1,
                _ => {}
            }
        }
        let f_one = one as f64 / samples as f64;
        let f_two = two as f64 / samples as f64;
        assert!((f_one - 0.60).abs() < 0.015, "one-outage fraction {f_one}");
        assert!((f_two - 0.10).abs() < 0.010, "two-outage fraction {f_two}");
    }

    #[test]
    fn sampled_totals_track_the_base_total() {
        let base = build_base_case(&twelve_substation_case()).unwrap();
        let base_total = base.total_generation_mw();
        let noise = NoiseConfig::default();
        let samples = 10_000;
        let mut sum = 0.0;
        for i in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(777);
            rng.set_stream(i);
            let g = sample_context(&base, &noise, &mut rng).unwrap();
            sum += g.total_generation_mw();
        }
        let mean = sum / samples as f64;
        // The total factor has sigma 500; the guarded redraws skew the
        // mean upward slightly, well inside three standard errors.
        let tol = 3.0 * noise.sigma_total_mw / (samples as f64).sqrt();
        assert!(
            (mean - base_total).abs() < tol,
            "mean {mean} vs base {base_total} (tol {tol})"
        );
    }

    #[test]
    fn redraw_guard_gives_up_eventually() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = positive_draw(&mut rng, -5.0, 1.0, "doomed");
        assert!(matches!(r, Err(DatagenError::RedrawLimit { .. })));
    }

    #[test]
    fn dataset_round_trip_and_determinism() {
        let base = build_base_case(&four_substation_case()).unwrap();
        let noise = NoiseConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let a = generate_dataset(&base, &noise, 20, 7, dir.path()).unwrap();
        assert_eq!(a.entries.len(), 20);
        let (manifest, grids) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest, a);
        assert_eq!(grids.len(), 20);
        assert!(grids.iter().all(|g| g.validate().is_empty()));

        // Regeneration into a fresh directory reproduces the manifest
        // byte for byte.
        let dir2 = tempfile::tempdir().unwrap();
        let b = generate_dataset(&base, &noise, 20, 7, dir2.path()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn tampered_dataset_file_is_caught() {
        let base = build_base_case(&four_substation_case()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&base, &NoiseConfig::default(), 3, 1, dir.path()).unwrap();
        let victim = dir.path().join(&m.entries[1].file);
        let mut text = std::fs::read_to_string(&victim).unwrap();
        text = text.replace("\"in_service\": true", "\"in_service\": false");
        std::fs::write(&victim, text).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DatagenError::ChecksumMismatch(_))
        ));
    }

    #[test]
    fn empty_dataset_is_fine() {
        let base = build_base_case(&four_substation_case()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&base, &NoiseConfig::default(), 0, 1, dir.path()).unwrap();
        assert!(m.entries.is_empty());
        let (_, grids) = load_dataset(dir.path()).unwrap();
        assert!(grids.is_empty());
    }
}
