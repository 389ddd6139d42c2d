//! Exchange-capacity linear program and a dense two-phase simplex solver.
//!
//! The capacity of a grid under a switching decision is found by scaling
//! zone-1 production up by a factor lambda (and zone-2 consumption by the
//! matching factor mu that keeps the system balanced) until a thermal
//! limit binds. With DC flow assumptions that search is a single LP over
//! (lambda, bus angles, switch flows):
//!
//! * objective: minimize the negated boundary flow, so the optimum value
//!   is minus the exchange capacity;
//! * per switch, big-M constraints tie angles together when closed and
//!   zero the flow when open;
//! * per in-service line, the angle-difference flow respects the limit;
//! * per address, injections and flows balance, with mu eliminated by
//!   substitution so the system stays linear in lambda;
//! * the angle at the lowest address is fixed to zero.
//!
//! Branch-and-bound reuses the same builder with per-switch states left
//! free, which turns each big-M pair into a constraint linear in a
//! relaxed y in [0, 1].
//!
//! The solver is a plain dense tableau simplex: phase 1 minimizes
//! artificial variables, phase 2 the true objective, entering and leaving
//! variables follow Bland's rule so cycling is impossible. Problem sizes
//! here are a few hundred rows at most, so no factorization machinery is
//! warranted.

use crate::grid::{Decision, Grid, Violation, Zone};
use std::io::{self, Write};

/// MVA base used to express capacities in per-unit.
pub const BASE_MVA: f64 = 100.0;

/// Residual tolerance for declaring a basic solution feasible.
pub const FEAS_TOL: f64 = 1e-7;
/// Reduced-cost tolerance for declaring a basis optimal.
pub const OPT_TOL: f64 = 1e-8;

const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub sense: Sense,
    pub rhs: f64,
}

/// Minimization problem over bounded variables. Bounds may be infinite
/// on either side; rows hold sparse coefficient lists.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub rows: Vec<Row>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LpProblem {
    /// Fresh problem with all variables free and zero objective.
    pub fn new(n_vars: usize) -> Self {
        LpProblem {
            n_vars,
            objective: vec![0.0; n_vars],
            rows: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n_vars],
            upper: vec![f64::INFINITY; n_vars],
        }
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, sense: Sense, rhs: f64) {
        self.rows.push(Row { coeffs, sense, rhs });
    }
}

/// Solver outcome. Infeasible and Unbounded are ordinary values so that
/// callers can branch on them; only resource exhaustion is an error.
#[derive(Debug, Clone, PartialEq)]
pub enum LpResult {
    Optimal { x: Vec<f64>, objective: f64 },
    Infeasible,
    Unbounded,
}

#[derive(Debug, thiserror::Error)]
pub enum LpError {
    #[error("simplex iteration limit reached ({0} pivots)")]
    IterationLimit(usize),
    #[error("simplex lost feasibility: {0}")]
    Numerical(&'static str),
}

struct ColMap {
    col: usize,
    neg: Option<usize>,
    offset: f64,
    sign: f64,
}

/// Dense two-phase simplex with Bland's anti-cycling rule.
pub fn solve(p: &LpProblem) -> Result<LpResult, LpError> {
    // Variable substitution: shift finite lower bounds to zero, mirror
    // upper-bounded-only variables, split free variables into a positive
    // and a negative part. Finite two-sided bounds become an extra row.
    let mut cols = Vec::with_capacity(p.n_vars);
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    let mut n_struct = 0usize;
    for j in 0..p.n_vars {
        let (l, u) = (p.lower[j], p.upper[j]);
        if l.is_finite() {
            cols.push(ColMap { col: n_struct, neg: None, offset: l, sign: 1.0 });
            if u.is_finite() {
                bound_rows.push((n_struct, u - l));
            }
            n_struct += 1;
        } else if u.is_finite() {
            cols.push(ColMap { col: n_struct, neg: None, offset: u, sign: -1.0 });
            n_struct += 1;
        } else {
            cols.push(ColMap { col: n_struct, neg: Some(n_struct + 1), offset: 0.0, sign: 1.0 });
            n_struct += 2;
        }
    }

    // Densify, fold offsets into the right-hand side, scale each row by
    // its largest coefficient, and normalize senses to Le/Eq with
    // non-negative rhs.
    struct Prow {
        a: Vec<f64>,
        rhs: f64,
        eq: bool,
        slack_sign: f64,
    }
    let mut prows: Vec<Prow> = Vec::new();
    for row in p.rows.iter() {
        let mut a = vec![0.0; n_struct];
        let mut rhs = row.rhs;
        for &(j, v) in &row.coeffs {
            let cm = &cols[j];
            a[cm.col] += v * cm.sign;
            if let Some(nc) = cm.neg {
                a[nc] -= v;
            }
            rhs -= v * cm.offset;
        }
        let mut eq = row.sense == Sense::Eq;
        if row.sense == Sense::Ge {
            for v in a.iter_mut() {
                *v = -*v;
            }
            rhs = -rhs;
        }
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < 1e-12 {
            // Empty row: either trivially satisfied or a contradiction.
            let bad = if eq { rhs.abs() > FEAS_TOL } else { rhs < -FEAS_TOL };
            if bad {
                return Ok(LpResult::Infeasible);
            }
            continue;
        }
        let mut a: Vec<f64> = a.into_iter().map(|v| v / scale).collect();
        rhs /= scale;
        let mut slack_sign = 1.0;
        if rhs < 0.0 {
            for v in a.iter_mut() {
                *v = -*v;
            }
            rhs = -rhs;
            slack_sign = -1.0;
        }
        if eq {
            slack_sign = 0.0;
        }
        let _ = &mut eq;
        prows.push(Prow { a, rhs, eq, slack_sign });
    }
    for &(col, ub) in &bound_rows {
        let mut a = vec![0.0; n_struct];
        a[col] = 1.0;
        // ub = u - l >= 0 always holds for sane bounds; a reversed pair
        // (l > u) is an unsatisfiable box.
        if ub < 0.0 {
            return Ok(LpResult::Infeasible);
        }
        prows.push(Prow { a, rhs: ub, eq: false, slack_sign: 1.0 });
    }

    let m = prows.len();
    let n_slack = prows.iter().filter(|r| !r.eq).count();
    let n_art = prows
        .iter()
        .filter(|r| r.eq || r.slack_sign < 0.0)
        .count();
    let n_total = n_struct + n_slack + n_art;

    // Tableau: m rows by (n_total + 1), last cell is the rhs. The
    // objective row lives separately with -z in its last cell.
    let width = n_total + 1;
    let mut t = vec![0.0f64; m * width];
    let mut basis = vec![0usize; m];
    let mut active = vec![true; m];
    let mut art_cols: Vec<usize> = Vec::new();
    {
        let mut slack_at = n_struct;
        let mut art_at = n_struct + n_slack;
        for (i, r) in prows.iter().enumerate() {
            let row = &mut t[i * width..(i + 1) * width];
            row[..n_struct].copy_from_slice(&r.a);
            row[n_total] = r.rhs;
            if !r.eq {
                row[slack_at] = r.slack_sign;
                if r.slack_sign > 0.0 {
                    basis[i] = slack_at;
                }
                slack_at += 1;
            }
            if r.eq || r.slack_sign < 0.0 {
                row[art_at] = 1.0;
                basis[i] = art_at;
                art_cols.push(art_at);
                art_at += 1;
            }
        }
    }
    let is_art = |c: usize| c >= n_struct + n_slack;
    let rhs_max = prows.iter().fold(0.0f64, |a, r| a.max(r.rhs));
    let feas_tol = FEAS_TOL * (1.0 + rhs_max);

    let mut obj = vec![0.0f64; width];
    let iter_cap = 20_000 + 200 * (m + n_total);
    let mut iters = 0usize;

    // One pivot step shared by both phases.
    let pivot = |t: &mut Vec<f64>, obj: &mut Vec<f64>, basis: &mut Vec<usize>,
                 active: &[bool], pr: usize, pc: usize| {
        let piv = t[pr * width + pc];
        for v in t[pr * width..(pr + 1) * width].iter_mut() {
            *v /= piv;
        }
        for i in 0..m {
            if i == pr || !active[i] {
                continue;
            }
            let f = t[i * width + pc];
            if f != 0.0 {
                for j in 0..width {
                    let v = t[pr * width + j];
                    t[i * width + j] -= f * v;
                }
                t[i * width + pc] = 0.0;
            }
        }
        let f = obj[pc];
        if f != 0.0 {
            for j in 0..width {
                obj[j] -= f * t[pr * width + j];
            }
            obj[pc] = 0.0;
        }
        basis[pr] = pc;
    };

    // Bland: entering column = lowest index with a sufficiently negative
    // reduced cost; leaving row = lowest basic index among ratio ties.
    let run = |t: &mut Vec<f64>, obj: &mut Vec<f64>, basis: &mut Vec<usize>,
               active: &[bool], ban_art: bool, iters: &mut usize|
     -> Result<bool, LpError> {
        loop {
            let enter = obj[..n_total]
                .iter()
                .enumerate()
                .find(|&(j, &o)| !(ban_art && is_art(j)) && o < -OPT_TOL)
                .map(|(j, _)| j);
            let Some(pc) = enter else { return Ok(true) };
            let mut best: Option<(f64, usize, usize)> = None;
            for i in 0..m {
                if !active[i] {
                    continue;
                }
                let a = t[i * width + pc];
                if a > PIVOT_TOL {
                    let ratio = t[i * width + n_total] / a;
                    let better = match best {
                        None => true,
                        Some((r, b, _)) => {
                            ratio < r - 1e-12 || (ratio < r + 1e-12 && basis[i] < b)
                        }
                    };
                    if better {
                        best = Some((ratio, basis[i], i));
                    }
                }
            }
            let Some((_, _, pr)) = best else { return Ok(false) };
            pivot(t, obj, basis, active, pr, pc);
            *iters += 1;
            if *iters > iter_cap {
                return Err(LpError::IterationLimit(*iters));
            }
        }
    };

    // Phase 1: minimize the sum of artificials.
    if n_art > 0 {
        for &c in &art_cols {
            obj[c] = 1.0;
        }
        for i in 0..m {
            if is_art(basis[i]) {
                for j in 0..width {
                    let v = t[i * width + j];
                    obj[j] -= v;
                }
            }
        }
        let done = run(&mut t, &mut obj, &mut basis, &active, false, &mut iters)?;
        if !done {
            return Err(LpError::Numerical("phase 1 reported unbounded"));
        }
        let z1 = -obj[n_total];
        if z1 > feas_tol {
            return Ok(LpResult::Infeasible);
        }
        // Drive leftover artificials out of the basis; rows where no real
        // pivot exists are redundant and get dropped.
        for i in 0..m {
            if !active[i] || !is_art(basis[i]) {
                continue;
            }
            let found = t[i * width..i * width + n_struct + n_slack]
                .iter()
                .position(|a| a.abs() > 1e-7);
            match found {
                Some(j) => pivot(&mut t, &mut obj, &mut basis, &active, i, j),
                None => active[i] = false,
            }
        }
    }

    // Phase 2: true objective over the feasible basis found above.
    obj.iter_mut().for_each(|v| *v = 0.0);
    for (cm, &c) in cols.iter().zip(&p.objective) {
        if c == 0.0 {
            continue;
        }
        obj[cm.col] += c * cm.sign;
        if let Some(nc) = cm.neg {
            obj[nc] -= c;
        }
    }
    for i in 0..m {
        if !active[i] {
            continue;
        }
        let cb = obj[basis[i]];
        if cb != 0.0 {
            for j in 0..width {
                let v = t[i * width + j];
                obj[j] -= cb * v;
            }
            obj[basis[i]] = 0.0;
        }
    }
    let done = run(&mut t, &mut obj, &mut basis, &active, true, &mut iters)?;
    if !done {
        return Ok(LpResult::Unbounded);
    }

    let mut xt = vec![0.0f64; n_total];
    for i in 0..m {
        if active[i] {
            xt[basis[i]] = t[i * width + n_total];
        }
    }
    let mut x = vec![0.0f64; p.n_vars];
    for (j, cm) in cols.iter().enumerate() {
        let mut v = cm.offset + cm.sign * xt[cm.col];
        if let Some(nc) = cm.neg {
            v -= xt[nc];
        }
        x[j] = v;
    }
    let objective = x
        .iter()
        .zip(p.objective.iter())
        .map(|(xv, cv)| xv * cv)
        .sum();
    Ok(LpResult::Optimal { x, objective })
}

/// Writes the problem in the usual LP text layout. Variable and row
/// names are optional; indices are used where they are missing.
pub fn dump_lp(
    p: &LpProblem,
    var_names: Option<&[String]>,
    row_names: Option<&[String]>,
    w: &mut impl Write,
) -> io::Result<()> {
    let vname = |j: usize| -> String {
        var_names
            .and_then(|n| n.get(j).cloned())
            .unwrap_or_else(|| format!("x{j}"))
    };
    let write_terms = |w: &mut dyn Write, coeffs: &[(usize, f64)]| -> io::Result<()> {
        let mut first = true;
        for &(j, v) in coeffs {
            if v == 0.0 {
                continue;
            }
            let sign = if v < 0.0 { "-" } else if first { "" } else { "+" };
            write!(w, " {sign} {} {}", v.abs(), vname(j))?;
            first = false;
        }
        if first {
            write!(w, " 0")?;
        }
        Ok(())
    };
    writeln!(w, "Minimize")?;
    write!(w, " obj:")?;
    let obj_terms: Vec<(usize, f64)> = p
        .objective
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| (j, *v))
        .collect();
    write_terms(w, &obj_terms)?;
    writeln!(w)?;
    writeln!(w, "Subject To")?;
    for (i, row) in p.rows.iter().enumerate() {
        let name = row_names
            .and_then(|n| n.get(i).cloned())
            .unwrap_or_else(|| format!("r{i}"));
        write!(w, " {name}:")?;
        write_terms(w, &row.coeffs)?;
        let op = match row.sense {
            Sense::Le => "<=",
            Sense::Ge => ">=",
            Sense::Eq => "=",
        };
        writeln!(w, " {op} {}", row.rhs)?;
    }
    writeln!(w, "Bounds")?;
    for j in 0..p.n_vars {
        let (l, u) = (p.lower[j], p.upper[j]);
        match (l.is_finite(), u.is_finite()) {
            (false, false) => writeln!(w, " {} free", vname(j))?,
            (true, false) => writeln!(w, " {} >= {l}", vname(j))?,
            (false, true) => writeln!(w, " {} <= {u}", vname(j))?,
            (true, true) => writeln!(w, " {l} <= {} <= {u}", vname(j))?,
        }
    }
    writeln!(w, "End")
}

/// Per-switch state inside the exchange LP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchState {
    Closed,
    Open,
    /// Relaxed to y in [0, 1]; used by branch-and-bound node bounds.
    Free,
}

/// Exchange LP together with its variable layout.
pub struct ExchangeLp {
    pub problem: LpProblem,
    pub var_names: Vec<String>,
    pub row_names: Vec<String>,
    n_addresses: usize,
    n_switches: usize,
    /// Column of the relaxed y variable per switch, when Free.
    y_col: Vec<Option<usize>>,
}

impl ExchangeLp {
    pub fn lambda_col(&self) -> usize {
        0
    }
    pub fn theta_col(&self, a: usize) -> usize {
        1 + a
    }
    pub fn flow_col(&self, e: usize) -> usize {
        1 + self.n_addresses + e
    }
    pub fn y_col(&self, e: usize) -> Option<usize> {
        self.y_col[e]
    }
    pub fn n_switches(&self) -> usize {
        self.n_switches
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExchangeError {
    #[error("decision has {got} entries but the grid has {expected} switches")]
    DecisionLength { expected: usize, got: usize },
    #[error("malformed grid: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidGrid(Vec<Violation>),
    #[error("degenerate context: {0}")]
    Degenerate(&'static str),
    #[error("exchange LP reported unbounded")]
    Unbounded,
    #[error(transparent)]
    Solver(#[from] LpError),
}

/// Big-M constant for the switch constraints. It must dominate every
/// flow a closed switch can legitimately carry and every angle spread an
/// open switch can legitimately see, otherwise the relaxation would
/// silently cap capacity below what the line limits allow. Scaled
/// production is bounded by total load plus the boundary limits, switch
/// flows by total scaled power, and within-island angle spreads by
/// sum(limit * reactance) over lines, so the sum below is always safe.
pub fn default_big_m(grid: &Grid) -> f64 {
    let gen: f64 = grid.generators.iter().map(|g| g.p_mw.abs()).sum();
    let load: f64 = grid.loads.iter().map(|l| l.p_mw.abs()).sum();
    let lines: f64 = grid
        .lines
        .iter()
        .filter(|l| l.in_service)
        .map(|l| l.f_bar_mw * (1.0 + l.x_pu))
        .sum();
    gen + load + lines
}

/// Zone-aggregated nominal powers used by the mu substitution.
struct ZoneSums {
    g1: f64,
    g2: f64,
    l1: f64,
    l2: f64,
}

fn zone_sums(grid: &Grid) -> ZoneSums {
    let mut s = ZoneSums { g1: 0.0, g2: 0.0, l1: 0.0, l2: 0.0 };
    for g in &grid.generators {
        match g.zone() {
            Some(Zone::Z1) => s.g1 += g.p_mw,
            Some(Zone::Z2) => s.g2 += g.p_mw,
            None => {}
        }
    }
    for l in &grid.loads {
        match l.zone() {
            Some(Zone::Z1) => s.l1 += l.p_mw,
            Some(Zone::Z2) => s.l2 += l.p_mw,
            None => {}
        }
    }
    s
}

/// Builds the exchange LP for fixed switch states.
pub fn build_exchange_lp(grid: &Grid, decision: &Decision) -> Result<ExchangeLp, ExchangeError> {
    if decision.len() != grid.n_switches() {
        return Err(ExchangeError::DecisionLength {
            expected: grid.n_switches(),
            got: decision.len(),
        });
    }
    let states: Vec<SwitchState> = decision
        .states
        .iter()
        .map(|&s| if s == 1 { SwitchState::Closed } else { SwitchState::Open })
        .collect();
    build_exchange_lp_inner(grid, &states, None, None)
}

/// Builds the node relaxation for branch-and-bound: unassigned switches
/// get a y variable in [0, 1], and an optional cardinality row keeps the
/// number of openings within `max_openings`.
pub fn build_relaxed_lp(
    grid: &Grid,
    states: &[SwitchState],
    max_openings: Option<usize>,
) -> Result<ExchangeLp, ExchangeError> {
    if states.len() != grid.n_switches() {
        return Err(ExchangeError::DecisionLength {
            expected: grid.n_switches(),
            got: states.len(),
        });
    }
    build_exchange_lp_inner(grid, states, max_openings, None)
}

/// As `build_exchange_lp` but with an explicit big-M constant, for tests
/// probing M sensitivity. The default M is the total nominal generation.
pub fn build_exchange_lp_with_m(
    grid: &Grid,
    decision: &Decision,
    m_const: f64,
) -> Result<ExchangeLp, ExchangeError> {
    if decision.len() != grid.n_switches() {
        return Err(ExchangeError::DecisionLength {
            expected: grid.n_switches(),
            got: decision.len(),
        });
    }
    let states: Vec<SwitchState> = decision
        .states
        .iter()
        .map(|&s| if s == 1 { SwitchState::Closed } else { SwitchState::Open })
        .collect();
    build_exchange_lp_inner(grid, &states, None, Some(m_const))
}

fn build_exchange_lp_inner(
    grid: &Grid,
    states: &[SwitchState],
    max_openings: Option<usize>,
    m_const: Option<f64>,
) -> Result<ExchangeLp, ExchangeError> {
    let violations = grid.validate();
    if !violations.is_empty() {
        return Err(ExchangeError::InvalidGrid(violations));
    }
    let sums = zone_sums(grid);
    if sums.l2 <= 1e-9 {
        return Err(ExchangeError::Degenerate(
            "no positive consumption in zone 2 to scale",
        ));
    }
    let big_m = m_const.unwrap_or_else(|| default_big_m(grid));
    let na = grid.n_addresses;
    let ns = grid.n_switches();
    let n_free = states.iter().filter(|s| **s == SwitchState::Free).count();
    let mut p = LpProblem::new(1 + na + ns + n_free);
    let mut var_names = Vec::with_capacity(p.n_vars);
    var_names.push("lambda".to_string());
    for a in 0..na {
        var_names.push(format!("th_{a}"));
    }
    for e in 0..ns {
        var_names.push(format!("fsw_{e}"));
    }
    p.lower[0] = 0.0;
    let mut y_col = vec![None; ns];
    let mut next = 1 + na + ns;
    for (e, st) in states.iter().enumerate() {
        if *st == SwitchState::Free {
            y_col[e] = Some(next);
            var_names.push(format!("y_{e}"));
            p.lower[next] = 0.0;
            p.upper[next] = 1.0;
            next += 1;
        }
    }
    let th = |a: usize| 1 + a;
    let fl = |e: usize| 1 + na + e;
    let mut row_names = Vec::new();

    // Switch constraints: |angle difference| <= M(1-y), |flow| <= M y.
    for (e, sw) in grid.switches.iter().enumerate() {
        let (f, t) = (sw.from, sw.to);
        match states[e] {
            SwitchState::Closed => {
                p.add_row(vec![(th(t), 1.0), (th(f), -1.0)], Sense::Le, 0.0);
                p.add_row(vec![(th(t), -1.0), (th(f), 1.0)], Sense::Le, 0.0);
                p.add_row(vec![(fl(e), 1.0)], Sense::Le, big_m);
                p.add_row(vec![(fl(e), -1.0)], Sense::Le, big_m);
            }
            SwitchState::Open => {
                p.add_row(vec![(th(t), 1.0), (th(f), -1.0)], Sense::Le, big_m);
                p.add_row(vec![(th(t), -1.0), (th(f), 1.0)], Sense::Le, big_m);
                p.add_row(vec![(fl(e), 1.0)], Sense::Le, 0.0);
                p.add_row(vec![(fl(e), -1.0)], Sense::Le, 0.0);
            }
            SwitchState::Free => {
                let y = y_col[e].unwrap();
                p.add_row(
                    vec![(th(t), 1.0), (th(f), -1.0), (y, big_m)],
                    Sense::Le,
                    big_m,
                );
                p.add_row(
                    vec![(th(t), -1.0), (th(f), 1.0), (y, big_m)],
                    Sense::Le,
                    big_m,
                );
                p.add_row(vec![(fl(e), 1.0), (y, -big_m)], Sense::Le, 0.0);
                p.add_row(vec![(fl(e), -1.0), (y, -big_m)], Sense::Le, 0.0);
            }
        }
        for suffix in ["ang_p", "ang_n", "flow_p", "flow_n"] {
            row_names.push(format!("sw{e}_{suffix}"));
        }
    }

    // Line thermal limits.
    for (i, line) in grid.lines.iter().enumerate() {
        if !line.in_service {
            continue;
        }
        let inv_x = 1.0 / line.x_pu;
        p.add_row(
            vec![(th(line.to), inv_x), (th(line.from), -inv_x)],
            Sense::Le,
            line.f_bar_mw,
        );
        p.add_row(
            vec![(th(line.to), -inv_x), (th(line.from), inv_x)],
            Sense::Le,
            line.f_bar_mw,
        );
        row_names.push(format!("line{i}_p"));
        row_names.push(format!("line{i}_n"));
    }

    // Power balance per address, with mu = (G1 lambda + G2 - L1) / L2
    // substituted into the zone-2 load term.
    let mu_lambda = sums.g1 / sums.l2;
    let mu_const = (sums.g2 - sums.l1) / sums.l2;
    let mut lam_coef = vec![0.0f64; na];
    let mut consts = vec![0.0f64; na];
    for g in &grid.generators {
        match g.zone() {
            Some(Zone::Z1) => lam_coef[g.port] -= g.p_mw,
            Some(Zone::Z2) => consts[g.port] -= g.p_mw,
            None => unreachable!("validated above"),
        }
    }
    for l in &grid.loads {
        match l.zone() {
            Some(Zone::Z1) => consts[l.port] += l.p_mw,
            Some(Zone::Z2) => {
                lam_coef[l.port] += l.p_mw * mu_lambda;
                consts[l.port] += l.p_mw * mu_const;
            }
            None => unreachable!("validated above"),
        }
    }
    let mut balance: Vec<Vec<(usize, f64)>> = vec![Vec::new(); na];
    for (a, &c) in lam_coef.iter().enumerate() {
        if c != 0.0 {
            balance[a].push((0, c));
        }
    }
    for (e, sw) in grid.switches.iter().enumerate() {
        balance[sw.from].push((fl(e), 1.0));
        balance[sw.to].push((fl(e), -1.0));
    }
    for line in grid.lines.iter().filter(|l| l.in_service) {
        let inv_x = 1.0 / line.x_pu;
        balance[line.from].push((th(line.from), inv_x));
        balance[line.from].push((th(line.to), -inv_x));
        balance[line.to].push((th(line.from), -inv_x));
        balance[line.to].push((th(line.to), inv_x));
    }
    for (a, coeffs) in balance.into_iter().enumerate() {
        p.add_row(coeffs, Sense::Eq, -consts[a]);
        row_names.push(format!("bal_{a}"));
    }

    // Angle reference at the lowest address.
    if na > 0 {
        p.add_row(vec![(th(0), 1.0)], Sense::Eq, 0.0);
        row_names.push("ref".to_string());
    }

    // Optional opening budget over relaxed switches: closed count must
    // stay at least n - max_openings.
    if let Some(k) = max_openings {
        let assigned_closed = states.iter().filter(|s| **s == SwitchState::Closed).count();
        let needed = ns as f64 - k as f64 - assigned_closed as f64;
        let coeffs: Vec<(usize, f64)> = y_col
            .iter()
            .flatten()
            .map(|&c| (c, 1.0))
            .collect();
        if !coeffs.is_empty() && needed > 0.0 {
            p.add_row(coeffs, Sense::Ge, needed);
            row_names.push("openings".to_string());
        }
    }

    // Objective: negated boundary flow over in-service lines.
    for line in grid.lines.iter().filter(|l| l.in_service && l.s != 0) {
        let s_over_x = line.s as f64 / line.x_pu;
        p.objective[th(line.to)] += s_over_x;
        p.objective[th(line.from)] -= s_over_x;
    }

    Ok(ExchangeLp {
        problem: p,
        var_names,
        row_names,
        n_addresses: na,
        n_switches: ns,
        y_col,
    })
}

/// Feasible exchange solution: capacity plus the supporting LP point.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityReport {
    pub capacity_mw: f64,
    pub capacity_pu: f64,
    /// Zone-1 production scaling at the optimum.
    pub lambda: f64,
    /// Zone-2 consumption scaling implied by lambda.
    pub mu: f64,
    /// LP objective, equal to minus the capacity. This is the score f
    /// that every surrogate and solver minimizes.
    pub objective_mw: f64,
    pub theta: Vec<f64>,
    pub switch_flow_mw: Vec<f64>,
}

/// Outcome of an exchange evaluation. Infeasibility is an ordinary,
/// expected value: plenty of decisions island load and have no balanced
/// operating point.
#[derive(Debug, Clone, PartialEq)]
pub enum Exchange {
    Feasible(CapacityReport),
    Infeasible,
}

impl Exchange {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Exchange::Feasible(_))
    }

    pub fn capacity_mw(&self) -> Option<f64> {
        match self {
            Exchange::Feasible(r) => Some(r.capacity_mw),
            Exchange::Infeasible => None,
        }
    }

    /// LP objective when feasible (lower is better).
    pub fn objective_mw(&self) -> Option<f64> {
        match self {
            Exchange::Feasible(r) => Some(r.objective_mw),
            Exchange::Infeasible => None,
        }
    }
}

/// Exchange capacity of a grid under a decision.
///
/// A grid without boundary lines has an identically zero objective; the
/// LP is then solved with lambda pinned to 1 purely to certify balance
/// feasibility, and the capacity is 0.
pub fn exchange_capacity(grid: &Grid, decision: &Decision) -> Result<Exchange, ExchangeError> {
    let no_border = !grid.lines.iter().any(|l| l.in_service && l.s != 0);
    let mut ex = build_exchange_lp(grid, decision)?;
    if no_border {
        ex.problem.add_row(vec![(0, 1.0)], Sense::Eq, 1.0);
        ex.row_names.push("lambda_fix".to_string());
    }
    let sums = zone_sums(grid);
    match solve(&ex.problem)? {
        LpResult::Optimal { x, objective } => {
            let lambda = x[ex.lambda_col()];
            let mu = (sums.g1 * lambda + sums.g2 - sums.l1) / sums.l2;
            let theta: Vec<f64> = (0..grid.n_addresses).map(|a| x[ex.theta_col(a)]).collect();
            let switch_flow_mw: Vec<f64> =
                (0..grid.n_switches()).map(|e| x[ex.flow_col(e)]).collect();
            Ok(Exchange::Feasible(CapacityReport {
                capacity_mw: -objective,
                capacity_pu: -objective / BASE_MVA,
                lambda,
                mu,
                objective_mw: objective,
                theta,
                switch_flow_mw,
            }))
        }
        LpResult::Infeasible => Ok(Exchange::Infeasible),
        LpResult::Unbounded => Err(ExchangeError::Unbounded),
    }
}

/// Per-address balance residuals of a reported solution, in MW. Used by
/// tests and the self-check command to certify declared-feasible points.
pub fn balance_residuals(grid: &Grid, decision: &Decision, report: &CapacityReport) -> Vec<f64> {
    let sums = zone_sums(grid);
    let mu = report.mu;
    let lambda = report.lambda;
    let mut res = vec![0.0f64; grid.n_addresses];
    for g in &grid.generators {
        let scale = if g.zone() == Some(Zone::Z1) { lambda } else { 1.0 };
        res[g.port] -= g.p_mw * scale;
    }
    for l in &grid.loads {
        let scale = if l.zone() == Some(Zone::Z2) { mu } else { 1.0 };
        res[l.port] += l.p_mw * scale;
    }
    for (e, sw) in grid.switches.iter().enumerate() {
        let f = if decision.is_closed(e) {
            report.switch_flow_mw[e]
        } else {
            0.0
        };
        res[sw.from] += f;
        res[sw.to] -= f;
    }
    for line in grid.lines.iter().filter(|l| l.in_service) {
        let flow = (report.theta[line.from] - report.theta[line.to]) / line.x_pu;
        res[line.from] += flow;
        res[line.to] -= flow;
    }
    debug_assert!(sums.l2 > 0.0);
    res
}
