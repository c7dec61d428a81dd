//! Dense linear programs and a bounded-variable revised simplex solver.
//!
//! Problems have the form
//!
//! ```text
//! min  c^T x
//! s.t. A_eq x  = b_eq
//!      A_ub x <= b_ub
//!      lo <= x <= hi        (infinite bounds allowed)
//! ```
//!
//! The solver returns the optimal vertex together with dual multipliers:
//! `duals_eq[i] = d obj / d b_eq[i]` and `duals_ub[k] = -d obj / d b_ub[k] >= 0`.
//! These are the shadow prices consumed by the envelope gradients in `sced`.
//!
//! Pricing is Dantzig's rule with lowest-index tie-breaking, switching to
//! Bland's rule after `5 (n + m)` iterations. The basis inverse is kept
//! explicitly and refactorized every [`REFACTOR_EVERY`] pivots.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const REFACTOR_EVERY: usize = 40;
const PIVOT_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const PRIMAL_TOL: f64 = 1e-9;

/// Role of an inequality row, used to pick out shadow prices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RowTag {
    Reserve(usize),
    TransferUpper(usize),
    TransferLower(usize),
    Other,
}

impl fmt::Display for RowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowTag::Reserve(z) => write!(f, "R{z}"),
            RowTag::TransferUpper(z) => write!(f, "TU{z}"),
            RowTag::TransferLower(z) => write!(f, "TL{z}"),
            RowTag::Other => write!(f, "O"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpProblem {
    pub cost: Vec<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: Vec<f64>,
    pub ub_matrix: DMatrix<f64>,
    pub ub_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub tags: Vec<RowTag>,
}

impl LpProblem {
    /// Empty problem over `n` variables with `[0, +inf)` bounds.
    pub fn new(cost: Vec<f64>) -> Self {
        let n = cost.len();
        Self {
            cost,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: Vec::new(),
            ub_matrix: DMatrix::zeros(0, n),
            ub_rhs: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
            tags: Vec::new(),
        }
    }

    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn add_eq(&mut self, row: &[f64], rhs: f64) {
        self.eq_matrix = append_row(&self.eq_matrix, row);
        self.eq_rhs.push(rhs);
    }

    pub fn add_ub(&mut self, row: &[f64], rhs: f64, tag: RowTag) {
        self.ub_matrix = append_row(&self.ub_matrix, row);
        self.ub_rhs.push(rhs);
        self.tags.push(tag);
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_vars();
        let bad = |msg: String| Err(Error::InvalidProblem(msg));
        if self.eq_matrix.ncols() != n || self.ub_matrix.ncols() != n {
            return bad("constraint matrix column count differs from cost length".into());
        }
        if self.eq_matrix.nrows() != self.eq_rhs.len() {
            return bad("equality rows and rhs differ in length".into());
        }
        if self.ub_matrix.nrows() != self.ub_rhs.len() || self.tags.len() != self.ub_rhs.len() {
            return bad("inequality rows, rhs and tags differ in length".into());
        }
        if self.lower.len() != n || self.upper.len() != n {
            return bad("bound vectors differ from cost length".into());
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.cost)
            || !finite(&self.eq_rhs)
            || !finite(&self.ub_rhs)
            || self.eq_matrix.iter().any(|x| !x.is_finite())
            || self.ub_matrix.iter().any(|x| !x.is_finite())
        {
            return bad("non-finite coefficient".into());
        }
        for j in 0..n {
            if self.lower[j].is_nan() || self.upper[j].is_nan() || self.lower[j] > self.upper[j] {
                return bad(format!("variable {j} has bounds [{}, {}]", self.lower[j], self.upper[j]));
            }
            if self.lower[j] == f64::INFINITY || self.upper[j] == f64::NEG_INFINITY {
                return bad(format!("variable {j} has an empty bound interval"));
            }
        }
        Ok(())
    }

    /// Writes the fixed-format text dump used for external cross-checks.
    ///
    /// Layout, one record per line, fields separated by single spaces and all
    /// reals printed with `{:.17e}`:
    ///
    /// ```text
    /// LPDUMP 1
    /// DIMS <n> <m_eq> <m_ub>
    /// C <j> <cost_j>                      (n lines)
    /// B <j> <lower_j> <upper_j>           (n lines, inf / -inf for open bounds)
    /// E <i> <rhs_i> <nnz> (<j> <a_ij>)*   (m_eq lines)
    /// U <k> <tag> <rhs_k> <nnz> (<j> <a_kj>)*  (m_ub lines)
    /// END
    /// ```
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "LPDUMP 1")?;
        writeln!(w, "DIMS {} {} {}", self.n_vars(), self.eq_rhs.len(), self.ub_rhs.len())?;
        for (j, c) in self.cost.iter().enumerate() {
            writeln!(w, "C {j} {c:.17e}")?;
        }
        for j in 0..self.n_vars() {
            writeln!(w, "B {j} {} {}", fmt_bound(self.lower[j]), fmt_bound(self.upper[j]))?;
        }
        for i in 0..self.eq_rhs.len() {
            write!(w, "E {i} {:.17e}", self.eq_rhs[i])?;
            write_sparse_row(&mut w, &self.eq_matrix, i)?;
        }
        for k in 0..self.ub_rhs.len() {
            write!(w, "U {k} {} {:.17e}", self.tags[k], self.ub_rhs[k])?;
            write_sparse_row(&mut w, &self.ub_matrix, k)?;
        }
        writeln!(w, "END")
    }
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.17e}")
    }
}

fn write_sparse_row<W: Write>(w: &mut W, m: &DMatrix<f64>, i: usize) -> std::io::Result<()> {
    let nz: Vec<(usize, f64)> = (0..m.ncols()).filter(|&j| m[(i, j)] != 0.0).map(|j| (j, m[(i, j)])).collect();
    write!(w, " {}", nz.len())?;
    for (j, v) in nz {
        write!(w, " {j} {v:.17e}")?;
    }
    writeln!(w)
}

fn append_row(m: &DMatrix<f64>, row: &[f64]) -> DMatrix<f64> {
    assert_eq!(row.len(), m.ncols(), "row length must match the number of variables");
    let r = m.nrows();
    let mut out = m.clone().resize_vertically(r + 1, 0.0);
    for (j, v) in row.iter().enumerate() {
        out[(r, j)] = *v;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

impl fmt::Display for LpStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LpStatus::Optimal => "optimal",
            LpStatus::Infeasible => "infeasible",
            LpStatus::Unbounded => "unbounded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub duals_ub: Vec<f64>,
    pub duals_eq: Vec<f64>,
    pub status: LpStatus,
    pub iterations: usize,
}

impl LpSolution {
    fn non_optimal(status: LpStatus, p: &LpProblem, iterations: usize) -> Self {
        Self {
            x: vec![f64::NAN; p.n_vars()],
            objective: match status {
                LpStatus::Unbounded => f64::NEG_INFINITY,
                _ => f64::INFINITY,
            },
            duals_ub: vec![0.0; p.ub_rhs.len()],
            duals_eq: vec![0.0; p.eq_rhs.len()],
            status,
            iterations,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Lagrangian dual value at the solution's multipliers.
///
/// With reduced costs `d = c - A_eq^T y + A_ub^T mu`, the value is
/// `b_eq^T y - b_ub^T mu + sum_j min_{lo_j <= x_j <= hi_j} d_j x_j`.
pub fn dual_objective(p: &LpProblem, s: &LpSolution) -> Result<f64> {
    if s.status != LpStatus::Optimal {
        return Err(Error::NotOptimal(s.status.to_string()));
    }
    let n = p.n_vars();
    let mut val = 0.0;
    for (b, y) in p.eq_rhs.iter().zip(&s.duals_eq) {
        val += b * y;
    }
    for (b, mu) in p.ub_rhs.iter().zip(&s.duals_ub) {
        val -= b * mu;
    }
    for j in 0..n {
        let mut d = p.cost[j];
        for i in 0..p.eq_rhs.len() {
            d -= p.eq_matrix[(i, j)] * s.duals_eq[i];
        }
        for k in 0..p.ub_rhs.len() {
            d += p.ub_matrix[(k, j)] * s.duals_ub[k];
        }
        let bound = if d > 0.0 { p.lower[j] } else { p.upper[j] };
        if bound.is_infinite() {
            if d.abs() > 1e-9 {
                return Ok(f64::NEG_INFINITY);
            }
            continue;
        }
        val += d * bound;
    }
    Ok(val)
}

/// Worst violation of the optimality invariants, relative to their scales.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub primal_residual: f64,
    pub min_dual_ub: f64,
    pub max_complementarity: f64,
    pub duality_gap: f64,
}

impl KktReport {
    /// Checks the fixed tolerances every optimal solve must meet.
    pub fn holds(&self, p: &LpProblem, s: &LpSolution) -> bool {
        let rhs_inf = p.eq_rhs.iter().chain(&p.ub_rhs).fold(0.0f64, |a, b| a.max(b.abs()));
        let scale = 1.0 + s.objective.abs();
        self.primal_residual <= 1e-7 * (1.0 + rhs_inf)
            && self.min_dual_ub >= -1e-9
            && self.max_complementarity <= 1e-6 * scale
            && self.duality_gap <= 1e-6 * scale
    }
}

pub fn kkt_report(p: &LpProblem, s: &LpSolution) -> Result<KktReport> {
    let dual = dual_objective(p, s)?;
    let x = DVector::from_column_slice(&s.x);
    let mut resid = 0.0f64;
    let ax = &p.eq_matrix * &x;
    for i in 0..p.eq_rhs.len() {
        resid = resid.max((ax[i] - p.eq_rhs[i]).abs());
    }
    let ux = &p.ub_matrix * &x;
    let mut comp = 0.0f64;
    for k in 0..p.ub_rhs.len() {
        let slack = p.ub_rhs[k] - ux[k];
        resid = resid.max(-slack);
        comp = comp.max((s.duals_ub[k] * slack).abs());
    }
    for j in 0..p.n_vars() {
        resid = resid.max(p.lower[j] - s.x[j]).max(s.x[j] - p.upper[j]);
    }
    Ok(KktReport {
        primal_residual: resid.max(0.0),
        min_dual_ub: s.duals_ub.iter().copied().fold(f64::INFINITY, f64::min),
        max_complementarity: comp,
        duality_gap: (s.objective - dual).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Basic,
    AtLower,
    AtUpper,
    /// Nonbasic free variable held at zero.
    Free,
}

struct Simplex {
    m: usize,
    ncols: usize,
    /// Columns of `[A | slack | artificial]`, rows ordered eq then ub.
    a: DMatrix<f64>,
    b: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    cost: Vec<f64>,
    x: Vec<f64>,
    state: Vec<VarState>,
    basis: Vec<usize>,
    binv: DMatrix<f64>,
    /// Columns that may never enter (artificials).
    frozen: Vec<bool>,
    pivots_since_refactor: usize,
    iterations: usize,
    bland_after: usize,
    max_iterations: usize,
}

enum PhaseOutcome {
    Optimal,
    Unbounded,
}

impl Simplex {
    fn build(p: &LpProblem) -> Self {
        let n = p.n_vars();
        let m_eq = p.eq_rhs.len();
        let m_ub = p.ub_rhs.len();
        let m = m_eq + m_ub;
        let ncols = n + m_ub + m;
        let mut a = DMatrix::zeros(m, ncols);
        for i in 0..m_eq {
            for j in 0..n {
                a[(i, j)] = p.eq_matrix[(i, j)];
            }
        }
        for k in 0..m_ub {
            for j in 0..n {
                a[(m_eq + k, j)] = p.ub_matrix[(k, j)];
            }
            a[(m_eq + k, n + k)] = 1.0;
        }
        let mut b = DVector::zeros(m);
        for i in 0..m_eq {
            b[i] = p.eq_rhs[i];
        }
        for k in 0..m_ub {
            b[m_eq + k] = p.ub_rhs[k];
        }
        let mut lo = vec![0.0; ncols];
        let mut hi = vec![f64::INFINITY; ncols];
        lo[..n].copy_from_slice(&p.lower);
        hi[..n].copy_from_slice(&p.upper);
        let mut x = vec![0.0; ncols];
        let mut state = vec![VarState::AtLower; ncols];
        for j in 0..n {
            if lo[j].is_finite() {
                x[j] = lo[j];
                state[j] = VarState::AtLower;
            } else if hi[j].is_finite() {
                x[j] = hi[j];
                state[j] = VarState::AtUpper;
            } else {
                x[j] = 0.0;
                state[j] = VarState::Free;
            }
        }
        // Residual of the rows with every structural at its starting bound.
        let mut resid = b.clone();
        for j in 0..n {
            if x[j] != 0.0 {
                for i in 0..m {
                    resid[i] -= a[(i, j)] * x[j];
                }
            }
        }
        let mut basis = vec![0; m];
        let mut binv = DMatrix::zeros(m, m);
        let mut frozen = vec![false; ncols];
        for i in 0..m {
            let art = n + m_ub + i;
            frozen[art] = true;
            if i >= m_eq && resid[i] >= 0.0 {
                // Slack is a feasible starting basic variable.
                let s = n + (i - m_eq);
                basis[i] = s;
                state[s] = VarState::Basic;
                x[s] = resid[i];
                binv[(i, i)] = 1.0;
                hi[art] = 0.0;
            } else {
                let sign = if resid[i] >= 0.0 { 1.0 } else { -1.0 };
                a[(i, art)] = sign;
                basis[i] = art;
                state[art] = VarState::Basic;
                x[art] = resid[i].abs();
                binv[(i, i)] = sign;
            }
        }
        let total = n + m;
        Self {
            m,
            ncols,
            a,
            b,
            lo,
            hi,
            cost: vec![0.0; ncols],
            x,
            state,
            basis,
            binv,
            frozen,
            pivots_since_refactor: 0,
            iterations: 0,
            bland_after: 5 * total,
            max_iterations: 50 * total + 1000,
        }
    }

    fn column(&self, j: usize) -> DVector<f64> {
        self.a.column(j).into_owned()
    }

    fn duals(&self) -> DVector<f64> {
        let cb = DVector::from_iterator(self.m, self.basis.iter().map(|&j| self.cost[j]));
        self.binv.tr_mul(&cb)
    }

    fn reduced_cost(&self, y: &DVector<f64>, j: usize) -> f64 {
        self.cost[j] - self.a.column(j).dot(y)
    }

    fn refactor(&mut self) -> Result<()> {
        let bmat = DMatrix::from_fn(self.m, self.m, |i, k| self.a[(i, self.basis[k])]);
        let lu = bmat.lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Numerical("basis matrix became singular".into()))?;
        self.binv = inv;
        self.pivots_since_refactor = 0;
        self.recompute_basic_values();
        Ok(())
    }

    fn recompute_basic_values(&mut self) {
        let mut rhs = self.b.clone();
        for j in 0..self.ncols {
            if self.state[j] != VarState::Basic && self.x[j] != 0.0 {
                for i in 0..self.m {
                    rhs[i] -= self.a[(i, j)] * self.x[j];
                }
            }
        }
        let xb = &self.binv * rhs;
        for (i, &j) in self.basis.iter().enumerate() {
            self.x[j] = xb[i];
        }
    }

    fn choose_entering(&self, y: &DVector<f64>, bland: bool) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.ncols {
            if self.frozen[j] || self.state[j] == VarState::Basic || self.lo[j] == self.hi[j] {
                continue;
            }
            let d = self.reduced_cost(y, j);
            let eligible = match self.state[j] {
                VarState::AtLower => d < -DUAL_TOL,
                VarState::AtUpper => d > DUAL_TOL,
                VarState::Free => d.abs() > DUAL_TOL,
                VarState::Basic => false,
            };
            if !eligible {
                continue;
            }
            if bland {
                return Some((j, d));
            }
            match best {
                Some((_, bd)) if d.abs() <= bd.abs() => {}
                _ => best = Some((j, d)),
            }
        }
        best
    }

    fn run_phase(&mut self) -> Result<PhaseOutcome> {
        loop {
            if self.iterations >= self.max_iterations {
                return Err(Error::SolverStall(self.iterations));
            }
            if self.pivots_since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
            }
            let y = self.duals();
            let bland = self.iterations >= self.bland_after;
            let Some((q, dq)) = self.choose_entering(&y, bland) else {
                return Ok(PhaseOutcome::Optimal);
            };
            self.iterations += 1;
            let dir = if dq < 0.0 { 1.0 } else { -1.0 };
            let alpha = &self.binv * self.column(q);

            // Ratio test: basic i moves by -t * dir * alpha_i.
            let own = self.hi[q] - self.lo[q];
            let mut limit = f64::INFINITY;
            for i in 0..self.m {
                let rate = dir * alpha[i];
                let bj = self.basis[i];
                let t = if rate > PIVOT_TOL && self.lo[bj].is_finite() {
                    (self.x[bj] - self.lo[bj] + PRIMAL_TOL) / rate
                } else if rate < -PIVOT_TOL && self.hi[bj].is_finite() {
                    (self.hi[bj] - self.x[bj] + PRIMAL_TOL) / -rate
                } else {
                    continue;
                };
                limit = limit.min(t);
            }
            // Among rows whose exact ratio is within the relaxed limit, take the
            // largest pivot (Bland mode: lowest basic variable index).
            let mut leave: Option<(usize, f64)> = None;
            let mut leave_key = (f64::NEG_INFINITY, usize::MAX);
            if limit.is_finite() {
                for i in 0..self.m {
                    let rate = dir * alpha[i];
                    let bj = self.basis[i];
                    let t = if rate > PIVOT_TOL && self.lo[bj].is_finite() {
                        (self.x[bj] - self.lo[bj]) / rate
                    } else if rate < -PIVOT_TOL && self.hi[bj].is_finite() {
                        (self.hi[bj] - self.x[bj]) / -rate
                    } else {
                        continue;
                    };
                    if t > limit {
                        continue;
                    }
                    let key = if bland { (-(bj as f64), bj) } else { (rate.abs(), i) };
                    let better = key.0 > leave_key.0 || (key.0 == leave_key.0 && key.1 < leave_key.1);
                    if better {
                        leave_key = key;
                        leave = Some((i, t.max(0.0)));
                    }
                }
            }

            let row_step = leave.map(|(_, t)| t).unwrap_or(f64::INFINITY);
            if own.is_finite() && own <= row_step {
                // Bound flip: entering variable crosses to its other bound.
                for i in 0..self.m {
                    let bj = self.basis[i];
                    self.x[bj] -= own * dir * alpha[i];
                }
                if dir > 0.0 {
                    self.x[q] = self.hi[q];
                    self.state[q] = VarState::AtUpper;
                } else {
                    self.x[q] = self.lo[q];
                    self.state[q] = VarState::AtLower;
                }
                continue;
            }
            let Some((r, t)) = leave else {
                return Ok(PhaseOutcome::Unbounded);
            };
            for i in 0..self.m {
                let bj = self.basis[i];
                self.x[bj] -= t * dir * alpha[i];
            }
            self.x[q] += t * dir;
            let out = self.basis[r];
            if dir * alpha[r] > 0.0 {
                self.x[out] = self.lo[out];
                self.state[out] = VarState::AtLower;
            } else {
                self.x[out] = self.hi[out];
                self.state[out] = VarState::AtUpper;
            }
            self.pivot(r, q, &alpha);
        }
    }

    fn pivot(&mut self, r: usize, q: usize, alpha: &DVector<f64>) {
        let piv = alpha[r];
        let row_r: Vec<f64> = (0..self.m).map(|k| self.binv[(r, k)] / piv).collect();
        for i in 0..self.m {
            if i == r {
                continue;
            }
            let f = alpha[i];
            if f != 0.0 {
                for k in 0..self.m {
                    self.binv[(i, k)] -= f * row_r[k];
                }
            }
        }
        for k in 0..self.m {
            self.binv[(r, k)] = row_r[k];
        }
        self.basis[r] = q;
        self.state[q] = VarState::Basic;
        self.pivots_since_refactor += 1;
    }

    /// Swaps zero-valued basic artificials for structural or slack columns.
    fn drive_out_artificials(&mut self, first_art: usize) -> Result<()> {
        for r in 0..self.m {
            let bj = self.basis[r];
            if bj < first_art {
                continue;
            }
            let row: Vec<f64> = (0..self.m).map(|k| self.binv[(r, k)]).collect();
            let mut best: Option<(usize, f64)> = None;
            for j in 0..first_art {
                if self.state[j] == VarState::Basic {
                    continue;
                }
                let v: f64 = (0..self.m).map(|k| row[k] * self.a[(k, j)]).sum();
                if v.abs() > 1e-7 && best.is_none_or(|(_, bv)| v.abs() > bv.abs()) {
                    best = Some((j, v));
                }
            }
            if let Some((q, _)) = best {
                let alpha = &self.binv * self.column(q);
                self.x[bj] = 0.0;
                self.state[bj] = VarState::AtLower;
                self.pivot(r, q, &alpha);
            }
        }
        self.refactor()
    }
}

/// Solves `p` with the bounded-variable revised simplex.
pub fn solve_lp(p: &LpProblem) -> Result<LpSolution> {
    p.validate()?;
    let n = p.n_vars();
    let m_eq = p.eq_rhs.len();
    let m_ub = p.ub_rhs.len();
    let mut s = Simplex::build(p);
    let first_art = n + m_ub;

    // Phase 1: minimize the sum of active artificials.
    let active_art = (first_art..s.ncols).any(|j| s.state[j] == VarState::Basic);
    if active_art {
        for j in first_art..s.ncols {
            s.cost[j] = if s.state[j] == VarState::Basic { 1.0 } else { 0.0 };
        }
        s.run_phase()?;
        s.refactor()?;
        let infeas: f64 = (first_art..s.ncols).map(|j| s.x[j].abs()).sum();
        let bscale = 1.0 + s.b.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if infeas > 1e-7 * bscale {
            return Ok(LpSolution::non_optimal(LpStatus::Infeasible, p, s.iterations));
        }
        for j in first_art..s.ncols {
            s.hi[j] = 0.0;
            s.cost[j] = 0.0;
            if s.state[j] != VarState::Basic {
                s.x[j] = 0.0;
            }
        }
        s.drive_out_artificials(first_art)?;
    }

    // Phase 2.
    s.cost[..n].copy_from_slice(&p.cost);
    for j in n..s.ncols {
        s.cost[j] = 0.0;
    }
    let outcome = s.run_phase()?;
    if let PhaseOutcome::Unbounded = outcome {
        return Ok(LpSolution::non_optimal(LpStatus::Unbounded, p, s.iterations));
    }
    s.refactor()?;
    // A refactor can expose tiny reduced-cost errors; polish once more.
    if let PhaseOutcome::Unbounded = s.run_phase()? {
        return Ok(LpSolution::non_optimal(LpStatus::Unbounded, p, s.iterations));
    }
    s.refactor()?;

    let y = s.duals();
    let mut x: Vec<f64> = s.x[..n].to_vec();
    for j in 0..n {
        // Snap onto bounds the basic values only miss by rounding.
        if p.lower[j].is_finite() && (x[j] - p.lower[j]).abs() <= 1e-12 * (1.0 + p.lower[j].abs()) {
            x[j] = p.lower[j];
        }
        if p.upper[j].is_finite() && (x[j] - p.upper[j]).abs() <= 1e-12 * (1.0 + p.upper[j].abs()) {
            x[j] = p.upper[j];
        }
    }
    let objective = x.iter().zip(&p.cost).map(|(a, c)| a * c).sum();
    let duals_eq = (0..m_eq).map(|i| y[i]).collect();
    let duals_ub = (0..m_ub)
        .map(|k| {
            let mu = -y[m_eq + k];
            if mu < 0.0 && mu > -DUAL_TOL {
                0.0
            } else {
                mu
            }
        })
        .collect();
    let sol = LpSolution { x, objective, duals_ub, duals_eq, status: LpStatus::Optimal, iterations: s.iterations };
    #[cfg(debug_assertions)]
    {
        let k = kkt_report(p, &sol)?;
        debug_assert!(k.holds(p, &sol), "optimality conditions violated: {k:?}");
    }
    Ok(sol)
}

/// Result of the dual-degeneracy probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyReport {
    pub flagged: bool,
    pub max_dual_shift: f64,
}

/// Re-solves with every right-hand side shifted by `+-1e-7` and flags the
/// point when the multipliers move by more than `1e-3`, which signals that an
/// alternative optimal dual basis exists.
pub fn dual_degeneracy(p: &LpProblem, base: &LpSolution) -> Result<DegeneracyReport> {
    if !base.is_optimal() {
        return Err(Error::NotOptimal(base.status.to_string()));
    }
    let mut shift = 0.0f64;
    for delta in [1e-7, -1e-7] {
        let mut q = p.clone();
        q.eq_rhs.iter_mut().for_each(|b| *b += delta);
        q.ub_rhs.iter_mut().for_each(|b| *b += delta);
        let s = solve_lp(&q)?;
        if !s.is_optimal() {
            shift = f64::INFINITY;
            continue;
        }
        for (a, b) in s.duals_ub.iter().zip(&base.duals_ub).chain(s.duals_eq.iter().zip(&base.duals_eq)) {
            shift = shift.max((a - b).abs());
        }
    }
    Ok(DegeneracyReport { flagged: shift > 1e-3, max_dual_shift: shift })
}
