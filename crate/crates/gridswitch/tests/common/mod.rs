//! Shared fixtures for the integration suites: an independent
//! contract-and-solve oracle for the exchange capacity, and a random
//! generator for small zone-consistent grids.
//!
//! The oracle deliberately shares nothing with the production solver
//! beyond the bus partition: it contracts closed switches, solves the
//! reduced flow as dense linear systems, and maximizes the boundary
//! transfer over the scaling factor analytically. Any disagreement with
//! the big-M linear program points at a real defect on one side.

use gridswitch::grid::{bus_partition, Decision, Grid, Injection, Line, Switch, Zone};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const PIN_TOL: f64 = 1e-9;
const FLOW_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleOutcome {
    Feasible { capacity_mw: f64 },
    Infeasible,
    Unbounded,
}

/// What the oracle solved, plus the magnitudes that decide whether a
/// big-M formulation of the same instance is trustworthy.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub outcome: OracleOutcome,
    /// Scaling factor at the optimum (0 when infeasible).
    pub lambda: f64,
    /// Largest angle spread between any two buses, in the MW-weighted
    /// units the big-M rows bound.
    pub theta_spread: f64,
    /// Largest per-bus sum of absolute address imbalances, an upper
    /// bound on any intra-bus switch flow a solver must route.
    pub max_bus_net_mw: f64,
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

fn infeasible() -> OracleReport {
    OracleReport {
        outcome: OracleOutcome::Infeasible,
        lambda: 0.0,
        theta_spread: 0.0,
        max_bus_net_mw: 0.0,
    }
}

/// Exchange capacity by contraction: closed switches merge addresses
/// into buses, per-bus injections are affine in the scaling factor, and
/// each island's balance either pins the factor or leaves it free to be
/// pushed against the line limits.
pub fn oracle_capacity(grid: &Grid, decision: &Decision) -> OracleReport {
    let part = bus_partition(grid, decision);
    let nb = part.n_buses;

    // Zone totals fix how zone-2 consumption tracks the zone-1 scaling.
    let (mut g1, mut g2, mut l1, mut l2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for g in &grid.generators {
        match g.zone().expect("valid grid") {
            Zone::Z1 => g1 += g.p_mw,
            Zone::Z2 => g2 += g.p_mw,
        }
    }
    for l in &grid.loads {
        match l.zone().expect("valid grid") {
            Zone::Z1 => l1 += l.p_mw,
            Zone::Z2 => l2 += l.p_mw,
        }
    }
    assert!(l2 > 1e-9, "oracle needs consumption to scale in zone 2");
    let mu_lambda = g1 / l2;
    let mu_const = (g2 - l1) / l2;

    // Per-bus injection p(lambda) = c + d lambda, and the per-address
    // pieces whose routing an intra-bus solver has to absorb.
    let mut c = vec![0.0f64; nb];
    let mut d = vec![0.0f64; nb];
    let mut addr_const = vec![0.0f64; grid.n_addresses];
    let mut addr_lambda = vec![0.0f64; grid.n_addresses];
    for g in &grid.generators {
        match g.zone().expect("valid grid") {
            Zone::Z1 => {
                d[part.bus_of[g.port]] += g.p_mw;
                addr_lambda[g.port] += g.p_mw;
            }
            Zone::Z2 => {
                c[part.bus_of[g.port]] += g.p_mw;
                addr_const[g.port] += g.p_mw;
            }
        }
    }
    for l in &grid.loads {
        match l.zone().expect("valid grid") {
            Zone::Z1 => {
                c[part.bus_of[l.port]] -= l.p_mw;
                addr_const[l.port] -= l.p_mw;
            }
            Zone::Z2 => {
                c[part.bus_of[l.port]] -= l.p_mw * mu_const;
                d[part.bus_of[l.port]] -= l.p_mw * mu_lambda;
                addr_const[l.port] -= l.p_mw * mu_const;
                addr_lambda[l.port] -= l.p_mw * mu_lambda;
            }
        }
    }

    // Islands of the contracted graph under in-service lines.
    let mut sets = DisjointSet::new(nb);
    for line in grid.lines.iter().filter(|l| l.in_service) {
        sets.union(part.bus_of[line.from], part.bus_of[line.to]);
    }
    let island: Vec<usize> = (0..nb).map(|b| sets.find(b)).collect();

    // Each island's balance: c_k + d_k lambda = 0 pins lambda, is
    // trivially satisfied, or is unsatisfiable.
    let mut pinned: Option<f64> = None;
    for root in 0..nb {
        if island[root] != root {
            continue;
        }
        let (mut ck, mut dk) = (0.0, 0.0);
        for b in 0..nb {
            if island[b] == root {
                ck += c[b];
                dk += d[b];
            }
        }
        if dk.abs() > PIN_TOL {
            let lam = -ck / dk;
            match pinned {
                None => pinned = Some(lam),
                Some(prev) => {
                    if (prev - lam).abs() > 1e-6 * (1.0 + prev.abs().max(lam.abs())) {
                        return infeasible();
                    }
                }
            }
        } else if ck.abs() > 1e-6 {
            return infeasible();
        }
    }
    if let Some(lam) = pinned {
        if lam < -PIN_TOL {
            return infeasible();
        }
    }

    // Reduced susceptance system with one reference bus per island.
    let mut reduced_index = vec![usize::MAX; nb];
    let mut n_red = 0usize;
    for b in 0..nb {
        if island[b] != b {
            reduced_index[b] = n_red;
            n_red += 1;
        }
    }
    let solve_flow = |p: &[f64]| -> Vec<f64> {
        if n_red == 0 {
            return vec![0.0; nb];
        }
        let mut b_mat = DMatrix::<f64>::zeros(n_red, n_red);
        let mut rhs = DVector::<f64>::zeros(n_red);
        for line in grid.lines.iter().filter(|l| l.in_service) {
            let (u, v) = (part.bus_of[line.from], part.bus_of[line.to]);
            if u == v {
                continue;
            }
            let b = 1.0 / line.x_pu;
            let (iu, iv) = (reduced_index[u], reduced_index[v]);
            if iu != usize::MAX {
                b_mat[(iu, iu)] += b;
            }
            if iv != usize::MAX {
                b_mat[(iv, iv)] += b;
            }
            if iu != usize::MAX && iv != usize::MAX {
                b_mat[(iu, iv)] -= b;
                b_mat[(iv, iu)] -= b;
            }
        }
        for b in 0..nb {
            if reduced_index[b] != usize::MAX {
                rhs[reduced_index[b]] = p[b];
            }
        }
        let theta_red = b_mat.lu().solve(&rhs).expect("island laplacian is regular");
        (0..nb)
            .map(|b| {
                if reduced_index[b] == usize::MAX {
                    0.0
                } else {
                    theta_red[reduced_index[b]]
                }
            })
            .collect()
    };

    // Line flows are affine in lambda: F = f0 + lambda f1.
    let line_flows = |theta: &[f64]| -> Vec<f64> {
        grid.lines
            .iter()
            .map(|line| {
                if !line.in_service {
                    return 0.0;
                }
                let (u, v) = (part.bus_of[line.from], part.bus_of[line.to]);
                (theta[u] - theta[v]) / line.x_pu
            })
            .collect()
    };
    let theta_c = solve_flow(&c);
    let theta_d = solve_flow(&d);
    let f0 = line_flows(&theta_c);
    let f1 = line_flows(&theta_d);

    // Feasible lambda interval from the limits, intersected with the
    // pin when one exists, then pushed to whichever end the boundary
    // transfer grows toward.
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    if let Some(lam) = pinned {
        let lam = lam.max(0.0);
        lo = lam;
        hi = lam;
    }
    for (i, line) in grid.lines.iter().enumerate() {
        if !line.in_service {
            continue;
        }
        if f1[i].abs() <= PIN_TOL {
            if f0[i].abs() > line.f_bar_mw + FLOW_TOL {
                return infeasible();
            }
            continue;
        }
        let a = (-line.f_bar_mw - f0[i]) / f1[i];
        let b = (line.f_bar_mw - f0[i]) / f1[i];
        lo = lo.max(a.min(b));
        hi = hi.min(a.max(b));
    }
    if lo > hi + FLOW_TOL {
        return infeasible();
    }
    let hi = hi.max(lo);

    let k0: f64 = grid
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.in_service && l.s != 0)
        .map(|(i, l)| f64::from(l.s) * f0[i])
        .sum();
    let k1: f64 = grid
        .lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.in_service && l.s != 0)
        .map(|(i, l)| f64::from(l.s) * f1[i])
        .sum();
    let lambda = if k1 > PIN_TOL {
        if hi.is_infinite() {
            return OracleReport {
                outcome: OracleOutcome::Unbounded,
                lambda: f64::INFINITY,
                theta_spread: f64::INFINITY,
                max_bus_net_mw: f64::INFINITY,
            };
        }
        hi
    } else {
        lo
    };
    let capacity_mw = k0 + lambda * k1;

    // Magnitudes at the optimum, for the big-M benignity screen.
    let theta: Vec<f64> = theta_c
        .iter()
        .zip(&theta_d)
        .map(|(tc, td)| tc + lambda * td)
        .collect();
    let theta_spread = theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - theta.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut line_net = vec![0.0f64; grid.n_addresses];
    for line in grid.lines.iter().filter(|l| l.in_service) {
        let (u, v) = (part.bus_of[line.from], part.bus_of[line.to]);
        let flow = (theta[u] - theta[v]) / line.x_pu;
        line_net[line.from] -= flow;
        line_net[line.to] += flow;
    }
    let mut bus_net = vec![0.0f64; nb];
    for a in 0..grid.n_addresses {
        bus_net[part.bus_of[a]] += (addr_const[a] + lambda * addr_lambda[a] + line_net[a]).abs();
    }
    let max_bus_net_mw = bus_net.iter().cloned().fold(0.0, f64::max);

    OracleReport {
        outcome: OracleOutcome::Feasible { capacity_mw },
        lambda,
        theta_spread,
        max_bus_net_mw,
    }
}

/// True when the instance keeps so far inside the big-M envelope that
/// the production formulation and the contracted oracle must agree.
pub fn benign_for_big_m(grid: &Grid, report: &OracleReport) -> bool {
    let m: f64 = grid.generators.iter().map(|g| g.p_mw).sum();
    match report.outcome {
        OracleOutcome::Feasible { .. } => {
            report.lambda <= 5.0
                && report.theta_spread <= 0.3 * m
                && report.max_bus_net_mw <= 0.5 * m
        }
        OracleOutcome::Infeasible => true,
        OracleOutcome::Unbounded => false,
    }
}

/// Random zone-consistent grid: contiguous zone-1 and zone-2 address
/// ranges, switches only inside a zone, a line chain covering all
/// addresses plus a few extras, and at least one generator to scale and
/// one load to follow it.
pub fn random_grid<R: Rng>(
    rng: &mut R,
    max_addresses: usize,
    max_switches: usize,
    tag: &str,
) -> Grid {
    let na = rng.gen_range(2..=max_addresses);
    let n1 = rng.gen_range(1..na);
    let zone_of = |a: usize| if a < n1 { Zone::Z1 } else { Zone::Z2 };

    let mut generators = Vec::new();
    let mut loads = Vec::new();
    for a in 0..na {
        let p = rng.gen_range(60.0..160.0);
        let zone = zone_of(a);
        // Ends are anchored so zone 1 always produces and zone 2 always
        // consumes; interior addresses host either kind.
        let generates = match zone {
            _ if a == 0 => true,
            _ if a == na - 1 => false,
            Zone::Z1 => rng.gen_bool(0.7),
            Zone::Z2 => rng.gen_bool(0.3),
        };
        if generates {
            generators.push(Injection::new(a, p, zone));
        } else {
            loads.push(Injection::new(a, p, zone));
        }
        // A second injection now and then, so buses can host both kinds.
        if rng.gen_bool(0.2) {
            let q = rng.gen_range(30.0..80.0);
            if generates {
                loads.push(Injection::new(a, q, zone));
            } else {
                generators.push(Injection::new(a, q, zone));
            }
        }
    }

    let mut switches = Vec::new();
    let n_switches = rng.gen_range(0..=max_switches);
    for _ in 0..n_switches {
        let side_len = if rng.gen_bool(0.5) { n1 } else { na - n1 };
        let (base, len) = if side_len == n1 { (0, n1) } else { (n1, na - n1) };
        if len < 2 {
            continue;
        }
        let from = base + rng.gen_range(0..len);
        let mut to = base + rng.gen_range(0..len);
        while to == from {
            to = base + rng.gen_range(0..len);
        }
        let name = if base == 0 { "west" } else { "east" };
        switches.push(Switch {
            from: from.min(to),
            to: from.max(to),
            substation: name.to_string(),
        });
    }

    let orientation = |f: usize, t: usize| -> i8 {
        match (zone_of(f), zone_of(t)) {
            (Zone::Z1, Zone::Z2) => 1,
            (Zone::Z2, Zone::Z1) => -1,
            _ => 0,
        }
    };
    let mut lines = Vec::new();
    for a in 0..na - 1 {
        lines.push(Line {
            from: a,
            to: a + 1,
            f_bar_mw: rng.gen_range(80.0..250.0),
            x_pu: rng.gen_range(0.05..0.2),
            s: orientation(a, a + 1),
            in_service: true,
        });
    }
    for _ in 0..rng.gen_range(0..=2) {
        let from = rng.gen_range(0..na);
        let mut to = rng.gen_range(0..na);
        while to == from {
            to = rng.gen_range(0..na);
        }
        lines.push(Line {
            from,
            to,
            f_bar_mw: rng.gen_range(80.0..250.0),
            x_pu: rng.gen_range(0.05..0.2),
            s: orientation(from, to),
            in_service: rng.gen_bool(0.9),
        });
    }

    let grid = Grid::new(tag, na, generators, loads, switches, lines);
    assert!(grid.validate().is_empty(), "generator produced an invalid grid");
    grid
}

/// Random decision over `n` switches, closed with probability `p_closed`.
pub fn random_decision<R: Rng>(rng: &mut R, n: usize, p_closed: f64) -> Decision {
    Decision::new((0..n).map(|_| u8::from(rng.gen_bool(p_closed))).collect())
        .expect("states are zero or one")
}
