//! Grid data model: typed hyper-edges attached to integer addresses.
//!
//! A grid is a flat list of addresses `0..n_addresses` plus four object
//! classes plugged into them through ports:
//!
//! * generators and loads sit on a single address (`port_o`),
//! * switches and lines span two addresses (`port_of`, `port_ot`).
//!
//! Addresses are electrical connection points, not buses. Buses only come
//! into existence once a switching decision is applied: closed switches
//! merge the addresses they span, lines never do. `bus_partition` computes
//! that quotient. Everything downstream (the exchange LP, the exact
//! solvers, the network policy) is indexed against the canonical switch
//! order established at construction time.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Schema tag written into every serialized grid document.
pub const GRID_SCHEMA: &str = "grid-v1";
/// Schema tag for serialized decisions.
pub const DECISION_SCHEMA: &str = "decision-v1";

/// Single-address injection (generator or load). `p_mw` is the nominal
/// active power; the zone flags say which side of the exchange boundary
/// the object belongs to. Exactly one flag must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    #[serde(rename = "port_o")]
    pub port: usize,
    pub p_mw: f64,
    pub in_z1: bool,
    pub in_z2: bool,
}

impl Injection {
    pub fn new(port: usize, p_mw: f64, zone: Zone) -> Self {
        Injection {
            port,
            p_mw,
            in_z1: zone == Zone::Z1,
            in_z2: zone == Zone::Z2,
        }
    }

    /// Zone of the injection, None when the flags are inconsistent.
    pub fn zone(&self) -> Option<Zone> {
        match (self.in_z1, self.in_z2) {
            (true, false) => Some(Zone::Z1),
            (false, true) => Some(Zone::Z2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Zone {
    Z1,
    Z2,
}

/// Controllable coupler between two addresses of one substation.
/// Carries no electrical parameters: closed means the two addresses are
/// the same bus, open means no current path and no constraint tying them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switch {
    #[serde(rename = "port_of")]
    pub from: usize,
    #[serde(rename = "port_ot")]
    pub to: usize,
    #[serde(rename = "substation_id")]
    pub substation: String,
}

/// Transmission line between two addresses (usually of different
/// substations). `s` marks boundary-crossing lines: +1 when the from
/// side lies in zone 1, -1 when it lies in zone 2, 0 for internal lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    #[serde(rename = "port_of")]
    pub from: usize,
    #[serde(rename = "port_ot")]
    pub to: usize,
    pub f_bar_mw: f64,
    pub x_pu: f64,
    pub s: i8,
    pub in_service: bool,
}

/// One operating context: a topology plus nominal injections and limits.
///
/// Switches are stored in canonical order, sorted by `substation`, then by
/// `(from, to)`. Decision and score vectors bind to this order, so two
/// documents describing the same grid always agree on what position `e`
/// means, regardless of the order objects were listed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub context_id: String,
    pub n_addresses: usize,
    pub generators: Vec<Injection>,
    pub loads: Vec<Injection>,
    pub switches: Vec<Switch>,
    pub lines: Vec<Line>,
}

/// Violations reported by `Grid::validate`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// (class, object index, port value) with port >= n_addresses.
    DanglingPort(&'static str, usize, usize),
    /// Injection with zero or two zone flags set.
    BadZoneFlags(&'static str, usize),
    /// In-service line with non-positive reactance.
    NonPositiveReactance(usize),
    /// In-service line with non-positive thermal limit.
    NonPositiveLimit(usize),
    /// Line whose `s` flag contradicts the zones of its endpoints under
    /// the all-closed partition (only checked where both sides have a
    /// determinate zone).
    WrongOrientation(usize),
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DanglingPort(class, i, port) => {
                write!(f, "{class}[{i}] references address {port} outside the grid")
            }
            Violation::BadZoneFlags(class, i) => {
                write!(f, "{class}[{i}] must set exactly one of in_z1/in_z2")
            }
            Violation::NonPositiveReactance(i) => {
                write!(f, "line[{i}] is in service with x_pu <= 0")
            }
            Violation::NonPositiveLimit(i) => {
                write!(f, "line[{i}] is in service with f_bar_mw <= 0")
            }
            Violation::WrongOrientation(i) => {
                write!(f, "line[{i}] orientation flag contradicts endpoint zones")
            }
        }
    }
}

impl Grid {
    /// Assembles a grid and puts switches into canonical order.
    pub fn new(
        context_id: impl Into<String>,
        n_addresses: usize,
        generators: Vec<Injection>,
        loads: Vec<Injection>,
        mut switches: Vec<Switch>,
        lines: Vec<Line>,
    ) -> Self {
        switches.sort_by(|a, b| {
            (&a.substation, a.from, a.to).cmp(&(&b.substation, b.from, b.to))
        });
        Grid {
            context_id: context_id.into(),
            n_addresses,
            generators,
            loads,
            switches,
            lines,
        }
    }

    pub fn n_switches(&self) -> usize {
        self.switches.len()
    }

    /// Sum of nominal generator powers. Used as the penalty offset that
    /// prices an infeasible switching decision during training.
    pub fn total_generation_mw(&self) -> f64 {
        self.generators.iter().map(|g| g.p_mw).sum()
    }

    /// Checks every structural invariant; an empty list means the grid is
    /// well formed. Violations are data, not errors: callers decide
    /// whether to abort, repair, or report.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let n = self.n_addresses;
        for (i, g) in self.generators.iter().enumerate() {
            if g.port >= n {
                out.push(Violation::DanglingPort("generator", i, g.port));
            }
            if g.zone().is_none() {
                out.push(Violation::BadZoneFlags("generator", i));
            }
        }
        for (i, l) in self.loads.iter().enumerate() {
            if l.port >= n {
                out.push(Violation::DanglingPort("load", i, l.port));
            }
            if l.zone().is_none() {
                out.push(Violation::BadZoneFlags("load", i));
            }
        }
        for (i, s) in self.switches.iter().enumerate() {
            if s.from >= n {
                out.push(Violation::DanglingPort("switch", i, s.from));
            }
            if s.to >= n {
                out.push(Violation::DanglingPort("switch", i, s.to));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.from >= n {
                out.push(Violation::DanglingPort("line", i, l.from));
            }
            if l.to >= n {
                out.push(Violation::DanglingPort("line", i, l.to));
            }
            if l.in_service && l.x_pu <= 0.0 {
                out.push(Violation::NonPositiveReactance(i));
            }
            if l.in_service && l.f_bar_mw <= 0.0 {
                out.push(Violation::NonPositiveLimit(i));
            }
        }
        // Orientation check: derive a zone per all-closed bus from the
        // injections it hosts; skip buses with no or mixed injections.
        if out.is_empty() {
            let part = bus_partition(self, &Decision::all_closed(self.n_switches()));
            let mut zone_of_bus: Vec<Option<Option<Zone>>> = vec![None; part.n_buses];
            let mut note = |bus: usize, z: Option<Zone>| {
                zone_of_bus[bus] = match zone_of_bus[bus] {
                    None => Some(z),
                    Some(prev) if prev == z => Some(prev),
                    Some(_) => Some(None),
                };
            };
            for g in &self.generators {
                note(part.bus_of[g.port], g.zone());
            }
            for l in &self.loads {
                note(part.bus_of[l.port], l.zone());
            }
            for (i, l) in self.lines.iter().enumerate() {
                let zf = zone_of_bus[part.bus_of[l.from]].flatten();
                let zt = zone_of_bus[part.bus_of[l.to]].flatten();
                let expected = match (zf, zt) {
                    (Some(a), Some(b)) if a == b => Some(0),
                    (Some(Zone::Z1), Some(Zone::Z2)) => Some(1),
                    (Some(Zone::Z2), Some(Zone::Z1)) => Some(-1),
                    _ => None,
                };
                if let Some(e) = expected {
                    if l.s != e {
                        out.push(Violation::WrongOrientation(i));
                    }
                }
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            #[serde(flatten)]
            grid: &'a Grid,
        }
        serde_json::to_string_pretty(&Doc {
            schema: GRID_SCHEMA,
            grid: self,
        })
        .expect("grid serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Grid, GridFileError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            #[serde(flatten)]
            grid: Grid,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != GRID_SCHEMA {
            return Err(GridFileError::Schema(doc.schema));
        }
        // Re-canonicalize in case the document was edited by hand.
        let g = doc.grid;
        Ok(Grid::new(
            g.context_id,
            g.n_addresses,
            g.generators,
            g.loads,
            g.switches,
            g.lines,
        ))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GridFileError {
    #[error("malformed grid document: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema tag {0:?}")]
    Schema(String),
    #[error("decision entries must be 0 or 1")]
    BadDecisionEntry,
}

/// Open/close states for every switch of a grid, canonical order.
/// 1 = closed, 0 = open.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decision {
    pub states: Vec<u8>,
}

impl Decision {
    pub fn new(states: Vec<u8>) -> Result<Self, GridFileError> {
        if states.iter().any(|&s| s > 1) {
            return Err(GridFileError::BadDecisionEntry);
        }
        Ok(Decision { states })
    }

    pub fn all_closed(n: usize) -> Self {
        Decision { states: vec![1; n] }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn is_closed(&self, e: usize) -> bool {
        self.states[e] == 1
    }

    /// Number of open switches.
    pub fn openings(&self) -> usize {
        self.states.iter().filter(|&&s| s == 0).count()
    }

    pub fn to_json(&self, context_id: &str) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            schema: &'static str,
            context_id: &'a str,
            states: &'a [u8],
        }
        serde_json::to_string(&Doc {
            schema: DECISION_SCHEMA,
            context_id,
            states: &self.states,
        })
        .expect("decision serialization cannot fail")
    }

    /// Returns (context_id, decision).
    pub fn from_json(text: &str) -> Result<(String, Decision), GridFileError> {
        #[derive(Deserialize)]
        struct Doc {
            schema: String,
            context_id: String,
            states: Vec<u8>,
        }
        let doc: Doc = serde_json::from_str(text)?;
        if doc.schema != DECISION_SCHEMA {
            return Err(GridFileError::Schema(doc.schema));
        }
        Ok((doc.context_id, Decision::new(doc.states)?))
    }
}

/// Raw switch scores produced by a policy, aligned with canonical order.
pub type Scores = Vec<f64>;

/// Quotient of the address set under closed switches. Bus labels are
/// normalized by first appearance in address order, so two partitions are
/// equal as electrical topologies iff their `bus_of` vectors are equal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusPartition {
    pub bus_of: Vec<usize>,
    pub n_buses: usize,
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Buses induced by a decision: addresses joined by closed switches share
/// a bus, lines never merge anything.
///
/// Panics if the decision length does not match the switch count; all
/// callers go through code paths that have already checked alignment.
pub fn bus_partition(grid: &Grid, decision: &Decision) -> BusPartition {
    assert_eq!(
        decision.len(),
        grid.n_switches(),
        "decision length {} does not match switch count {}",
        decision.len(),
        grid.n_switches()
    );
    let mut uf = UnionFind::new(grid.n_addresses);
    for (e, sw) in grid.switches.iter().enumerate() {
        if decision.is_closed(e) {
            uf.union(sw.from, sw.to);
        }
    }
    let mut label: BTreeMap<usize, usize> = BTreeMap::new();
    let mut bus_of = Vec::with_capacity(grid.n_addresses);
    for a in 0..grid.n_addresses {
        let root = uf.find(a);
        let next = label.len();
        let id = *label.entry(root).or_insert(next);
        bus_of.push(id);
    }
    BusPartition {
        n_buses: label.len(),
        bus_of,
    }
}

/// Feature channels subject to empirical normalization. Binary and
/// categorical channels (zone flags, orientation, service state) pass
/// through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureChannel {
    GenP,
    LoadP,
    LineLimit,
    LineReactance,
}

const CHANNELS: [FeatureChannel; 4] = [
    FeatureChannel::GenP,
    FeatureChannel::LoadP,
    FeatureChannel::LineLimit,
    FeatureChannel::LineReactance,
];

/// Monotone piecewise-linear map fitted to the empirical CDF of one
/// channel: K knots at evenly spaced quantile levels, linear interpolation
/// between them, clamping outside the observed range. The observed
/// minimum maps to 0, the maximum to 1, a constant channel to 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCdf {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseCdf {
    fn fit(samples: &mut Vec<f64>, knots: usize) -> Self {
        assert!(knots >= 2, "need at least two quantile knots");
        samples.retain(|v| v.is_finite());
        if samples.is_empty() {
            return PiecewiseCdf {
                xs: vec![0.0],
                ys: vec![0.5],
            };
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len();
        if samples[n - 1] == samples[0] {
            // Degenerate channel: every value identical.
            return PiecewiseCdf {
                xs: vec![samples[0]],
                ys: vec![0.5],
            };
        }
        let mut xs = Vec::with_capacity(knots);
        let mut ys = Vec::with_capacity(knots);
        for i in 0..knots {
            let q = i as f64 / (knots - 1) as f64;
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            let x = if lo == hi {
                samples[lo]
            } else {
                let w = pos - lo as f64;
                samples[lo] * (1.0 - w) + samples[hi] * w
            };
            // Keep abscissae strictly increasing; on ties keep the lowest
            // quantile so the observed minimum still maps to 0.
            if xs.last().is_none_or(|&last| x > last) {
                xs.push(x);
                ys.push(q);
            }
        }
        PiecewiseCdf { xs, ys }
    }

    pub fn apply(&self, v: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 || v <= self.xs[0] {
            return self.ys[0];
        }
        if v >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = match self.xs.binary_search_by(|x| x.partial_cmp(&v).unwrap()) {
            Ok(i) => return self.ys[i],
            Err(i) => i,
        };
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        let (y0, y1) = (self.ys[i - 1], self.ys[i]);
        y0 + (y1 - y0) * (v - x0) / (x1 - x0)
    }
}

/// Per-channel empirical normalizer fitted on a training collection and
/// frozen into checkpoints, so evaluation sees the same input scaling the
/// policy was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfNormalizer {
    pub knots: usize,
    maps: BTreeMap<FeatureChannel, PiecewiseCdf>,
}

impl EcdfNormalizer {
    pub fn fit(grids: &[Grid], knots: usize) -> Self {
        let mut maps = BTreeMap::new();
        for ch in CHANNELS {
            let mut samples: Vec<f64> = Vec::new();
            for g in grids {
                match ch {
                    FeatureChannel::GenP => {
                        samples.extend(g.generators.iter().map(|x| x.p_mw))
                    }
                    FeatureChannel::LoadP => samples.extend(g.loads.iter().map(|x| x.p_mw)),
                    FeatureChannel::LineLimit => {
                        samples.extend(g.lines.iter().map(|x| x.f_bar_mw))
                    }
                    FeatureChannel::LineReactance => {
                        samples.extend(g.lines.iter().map(|x| x.x_pu))
                    }
                }
            }
            maps.insert(ch, PiecewiseCdf::fit(&mut samples, knots));
        }
        EcdfNormalizer { knots, maps }
    }

    pub fn map(&self, ch: FeatureChannel, v: f64) -> f64 {
        self.maps[&ch].apply(v)
    }

    /// Returns a copy of the grid with numeric features replaced by their
    /// normalized values. Only for feeding the policy network; the LP and
    /// the solvers always read raw grids.
    pub fn apply(&self, grid: &Grid) -> Grid {
        let mut g = grid.clone();
        for gen in &mut g.generators {
            gen.p_mw = self.map(FeatureChannel::GenP, gen.p_mw);
        }
        for load in &mut g.loads {
            load.p_mw = self.map(FeatureChannel::LoadP, load.p_mw);
        }
        for line in &mut g.lines {
            line.f_bar_mw = self.map(FeatureChannel::LineLimit, line.f_bar_mw);
            line.x_pu = self.map(FeatureChannel::LineReactance, line.x_pu);
        }
        g
    }
}
