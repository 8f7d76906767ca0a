//! Dense convex QP solver for small problems:
//!
//! ```text
//! minimize    1/2 x'Hx + g'x
//! subject to  A_eq x = b_eq
//!             lower <= A_in x <= upper
//! ```
//!
//! The method is the Goldfarb-Idnani dual active-set scheme. It starts from
//! the equality-constrained minimiser (or a warm-start active set) and adds
//! the most violated constraint each outer iteration, dropping blocking
//! constraints on the way. Every linear solve is a dense LU of the active KKT
//! matrix, which is cheap at the 10 to 20 variable scale this is built for.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Ridge always added to the Hessian.
pub const BASE_RIDGE: f64 = 1e-10;
const ESCALATION: [f64; 3] = [1e-10, 1e-8, 1e-6];
const VIOLATION_TOL: f64 = 1e-10;
/// A violated row that is numerically dependent on the active set is
/// tolerated, rather than reported infeasible, up to this scaled violation.
const DEGENERATE_TOL: f64 = 1e-8;
const PIVOT_RATIO: f64 = 1e-15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("KKT system singular after ridge escalation")]
    NumericalBreakdown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Lower,
    Upper,
}

/// One side of one inequality row held at equality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActiveConstraint {
    pub row: usize,
    pub side: Side,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl QpProblem {
    pub fn new(h: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        Self {
            h,
            g,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            lower: DVector::zeros(0),
            upper: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn with_equality(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = stack_rows(&self.a_eq, &a);
        self.b_eq = stack_vec(&self.b_eq, &b);
        self
    }

    /// Append two-sided rows. Use infinities for one-sided rows.
    pub fn with_inequality(
        mut self,
        a: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Self {
        self.a_in = stack_rows(&self.a_in, &a);
        self.lower = stack_vec(&self.lower, &lower);
        self.upper = stack_vec(&self.upper, &upper);
        self
    }

    /// Append `lower <= x <= upper` as identity rows.
    pub fn with_bounds(self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        let n = self.n();
        self.with_inequality(DMatrix::identity(n, n), lower, upper)
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n();
        let bad = |m: String| Err(QpError::DimensionMismatch(m));
        if self.h.shape() != (n, n) {
            return bad(format!("H is {:?}, expected {n}x{n}", self.h.shape()));
        }
        if (&self.h - self.h.transpose()).amax() > 1e-10 * (1.0 + self.h.amax()) {
            return bad("H is not symmetric".into());
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return bad("equality block has inconsistent shape".into());
        }
        if self.a_eq.nrows() > n {
            return bad(format!(
                "{} equality rows exceed {n} variables",
                self.a_eq.nrows()
            ));
        }
        let m = self.a_in.nrows();
        if self.a_in.ncols() != n || self.lower.len() != m || self.upper.len() != m {
            return bad("inequality block has inconsistent shape".into());
        }
        Ok(())
    }

    /// Largest violation of any equality or inequality at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut v: f64 = 0.0;
        if self.a_eq.nrows() > 0 {
            v = v.max((&self.a_eq * x - &self.b_eq).amax());
        }
        let ax = &self.a_in * x;
        for i in 0..ax.len() {
            v = v.max(self.lower[i] - ax[i]).max(ax[i] - self.upper[i]);
        }
        v
    }
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 {
        return b.clone();
    }
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
    out.rows_mut(0, a.nrows()).copy_from(a);
    out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
    out
}

fn stack_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub status: QpStatus,
    /// Inequality sides held at equality, sorted.
    pub active_set: Vec<ActiveConstraint>,
    /// Multipliers with `Hx + g + A_eq' nu + A_in' mu = 0`.
    pub eq_multipliers: DVector<f64>,
    pub in_multipliers: DVector<f64>,
    /// Max of stationarity, primal violation and complementarity.
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub solve_time_us: f64,
}

/// One-sided constraint `c'x >= d`.
struct Cons {
    c: DVector<f64>,
    d: f64,
    norm: f64,
    id: ActiveConstraint,
}

#[derive(Debug, Clone)]
pub struct QpSolver {
    pub max_iter: usize,
}

impl Default for QpSolver {
    fn default() -> Self {
        Self { max_iter: 200 }
    }
}

impl QpSolver {
    pub fn new(max_iter: usize) -> Self {
        Self { max_iter }
    }

    pub fn solve(&self, p: &QpProblem) -> Result<QpSolution, QpError> {
        self.solve_warm(p, &[])
    }

    /// Solve starting from a previous active set. Unusable warm sets fall
    /// back to a cold start.
    pub fn solve_warm(
        &self,
        p: &QpProblem,
        warm: &[ActiveConstraint],
    ) -> Result<QpSolution, QpError> {
        let start = Instant::now();
        p.validate()?;
        let n = p.n();
        let n_eq = p.a_eq.nrows();
        let mut h = p.h.clone();
        for i in 0..n {
            h[(i, i)] += BASE_RIDGE;
        }

        let mut cons: Vec<Cons> = Vec::with_capacity(2 * p.a_in.nrows());
        for r in 0..p.a_in.nrows() {
            let row = p.a_in.row(r).transpose();
            let norm = row.norm().max(f64::MIN_POSITIVE);
            if p.lower[r].is_finite() {
                cons.push(Cons {
                    c: row.clone(),
                    d: p.lower[r],
                    norm,
                    id: ActiveConstraint {
                        row: r,
                        side: Side::Lower,
                    },
                });
            }
            if p.upper[r].is_finite() {
                cons.push(Cons {
                    c: -row,
                    d: -p.upper[r],
                    norm,
                    id: ActiveConstraint {
                        row: r,
                        side: Side::Upper,
                    },
                });
            }
        }
        let eq_rows: Vec<DVector<f64>> = (0..n_eq).map(|i| p.a_eq.row(i).transpose()).collect();
        let kkt = Kkt {
            h: &h,
            g: &p.g,
            eq_rows: &eq_rows,
            b_eq: &p.b_eq,
            cons: &cons,
        };

        let mut active: Vec<usize> = Vec::new();
        let mut iterations = 0;
        let mut state = None;
        if !warm.is_empty() {
            let mut seen_rows = std::collections::HashSet::new();
            for w in warm {
                if let Some(i) = cons.iter().position(|c| c.id == *w) {
                    if seen_rows.insert(w.row) {
                        active.push(i);
                    }
                }
            }
            if active.len() + n_eq <= n {
                state = kkt.make_dual_feasible(&mut active, &mut iterations);
            }
            if state.is_none() {
                active.clear();
            }
        }
        let (mut x, mut u_eq, mut u) = match state {
            Some(s) => s,
            None => {
                active.clear();
                kkt.subproblem(&active)?
            }
        };
        if n_eq > 0 && (&p.a_eq * &x - &p.b_eq).amax() > 1e-8 * (1.0 + p.b_eq.amax()) {
            return Ok(finish(
                p,
                x,
                QpStatus::Infeasible,
                &cons,
                &active,
                u_eq,
                u,
                iterations,
                start,
            ));
        }

        let mut status = QpStatus::Optimal;
        let mut tolerated: Vec<usize> = Vec::new();
        'outer: loop {
            // most violated inactive constraint, row-normalised
            let mut worst = None;
            let mut worst_v = -VIOLATION_TOL;
            for (i, c) in cons.iter().enumerate() {
                if active.contains(&i) || tolerated.contains(&i) {
                    continue;
                }
                let s = (c.c.dot(&x) - c.d) / c.norm;
                if s < worst_v {
                    worst_v = s;
                    worst = Some(i);
                }
            }
            let Some(pi) = worst else { break };
            let mut u_p = 0.0;

            loop {
                iterations += 1;
                if iterations > self.max_iter {
                    status = QpStatus::MaxIter;
                    break 'outer;
                }
                let np = &cons[pi].c;
                let (z, r_eq, r) = kkt.direction(&active, np)?;
                let s_p = np.dot(&x) - cons[pi].d;
                let zn = z.dot(np);
                let t2 = if zn > 1e-14 * np.norm_squared() {
                    -s_p / zn
                } else {
                    f64::INFINITY
                };
                let mut t1 = f64::INFINITY;
                let mut block = None;
                for (k, (&rk, &uk)) in r.iter().zip(u.iter()).enumerate() {
                    if rk > 1e-14 {
                        let t = uk / rk;
                        if t < t1 {
                            t1 = t;
                            block = Some(k);
                        }
                    }
                }
                if !t2.is_finite() && !t1.is_finite() {
                    if u_p == 0.0 && -s_p / cons[pi].norm <= DEGENERATE_TOL {
                        tolerated.push(pi);
                        continue 'outer;
                    }
                    status = QpStatus::Infeasible;
                    break 'outer;
                }
                if t2 <= t1 {
                    // full step: p joins the active set
                    active.push(pi);
                    tolerated.clear();
                    let (xs, ue, us) = kkt.subproblem(&active)?;
                    x = xs;
                    u_eq = ue;
                    u = us.map(|v| v.max(0.0));
                    continue 'outer;
                }
                // partial step: drop the blocking constraint
                let k = block.expect("finite t1 has a blocking index");
                if t2.is_finite() {
                    x += &z * t1;
                }
                u_eq -= &r_eq * t1;
                u -= &r * t1;
                u_p += t1;
                active.remove(k);
                u = DVector::from_iterator(
                    active.len(),
                    u.iter()
                        .enumerate()
                        .filter(|(i, _)| *i != k)
                        .map(|(_, v)| v.max(0.0)),
                );
                if !t2.is_finite() {
                    continue;
                }
                // re-solve on the reduced set, keeping p's accumulated multiplier
                let top = &cons[pi].c * u_p - &p.g;
                let (xs, ue, us) = kkt.subproblem_shifted(&active, &top)?;
                x = xs;
                u_eq = ue;
                u = us.map(|v| v.max(0.0));
            }
        }

        if status == QpStatus::Optimal {
            // proximal refinement removes the bias of the internal ridge
            for _ in 0..2 {
                let top = &x * BASE_RIDGE - &p.g;
                let (xs, ue, us) = kkt.subproblem_shifted(&active, &top)?;
                x = xs;
                u_eq = ue;
                u = us.map(|v| v.max(0.0));
            }
        }
        Ok(finish(
            p, x, status, &cons, &active, u_eq, u, iterations, start,
        ))
    }
}

struct Kkt<'a> {
    h: &'a DMatrix<f64>,
    g: &'a DVector<f64>,
    eq_rows: &'a [DVector<f64>],
    b_eq: &'a DVector<f64>,
    cons: &'a [Cons],
}

impl Kkt<'_> {
    fn matrix(&self, active: &[usize], delta: f64) -> DMatrix<f64> {
        let n = self.h.nrows();
        let m = self.eq_rows.len() + active.len();
        let mut k = DMatrix::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(self.h);
        for i in 0..n {
            k[(i, i)] += delta;
        }
        let rows = self
            .eq_rows
            .iter()
            .chain(active.iter().map(|&i| &self.cons[i].c));
        for (j, c) in rows.enumerate() {
            for i in 0..n {
                k[(i, n + j)] = -c[i];
                k[(n + j, i)] = c[i];
            }
            k[(n + j, n + j)] = delta;
        }
        k
    }

    fn solve(&self, active: &[usize], rhs: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        let mut delta = 0.0;
        for attempt in 0..=ESCALATION.len() {
            let lu = self.matrix(active, delta).lu();
            let diag = lu.u().diagonal().abs();
            let ok = diag.min() > PIVOT_RATIO * diag.max().max(1.0);
            if ok {
                if let Some(sol) = lu.solve(rhs) {
                    if sol.iter().all(|v| v.is_finite()) {
                        return Ok(sol);
                    }
                }
            }
            if attempt < ESCALATION.len() {
                delta = ESCALATION[attempt];
            }
        }
        Err(QpError::NumericalBreakdown)
    }

    fn split(
        &self,
        sol: &DVector<f64>,
        n_act: usize,
    ) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let n = self.h.nrows();
        let n_eq = self.eq_rows.len();
        (
            sol.rows(0, n).into_owned(),
            sol.rows(n, n_eq).into_owned(),
            sol.rows(n + n_eq, n_act).into_owned(),
        )
    }

    /// Minimiser with the active set held at equality, plus multipliers.
    fn subproblem(
        &self,
        active: &[usize],
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
        self.subproblem_shifted(active, &(-self.g))
    }

    /// Like `subproblem` with the stationarity right-hand side `Hx = top + A'u`.
    fn subproblem_shifted(
        &self,
        active: &[usize],
        top: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
        let n = self.h.nrows();
        let m = self.eq_rows.len() + active.len();
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(top);
        for j in 0..self.eq_rows.len() {
            rhs[n + j] = self.b_eq[j];
        }
        for (j, &i) in active.iter().enumerate() {
            rhs[n + self.eq_rows.len() + j] = self.cons[i].d;
        }
        let sol = self.solve(active, &rhs)?;
        Ok(self.split(&sol, active.len()))
    }

    /// Primal step `z` and multiplier rates `r` for raising constraint `np`.
    fn direction(
        &self,
        active: &[usize],
        np: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>), QpError> {
        let n = self.h.nrows();
        let m = self.eq_rows.len() + active.len();
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(np);
        let sol = self.solve(active, &rhs)?;
        // the matrix carries -A', so the solved dual block is -r
        let (z, neg_r_eq, neg_r) = self.split(&sol, active.len());
        Ok((z, -neg_r_eq, -neg_r))
    }

    /// Solve on a warm set and drop negative multipliers until none remain.
    fn make_dual_feasible(
        &self,
        active: &mut Vec<usize>,
        iterations: &mut usize,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        loop {
            let (x, ue, u) = self.subproblem(active).ok()?;
            if x.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let (k, min) =
                u.iter().enumerate().fold(
                    (usize::MAX, 0.0),
                    |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc },
                );
            if min >= -1e-12 || k == usize::MAX {
                return Some((x, ue, u.map(|v| v.max(0.0))));
            }
            active.remove(k);
            *iterations += 1;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    p: &QpProblem,
    x: DVector<f64>,
    status: QpStatus,
    cons: &[Cons],
    active: &[usize],
    u_eq: DVector<f64>,
    u: DVector<f64>,
    iterations: usize,
    start: Instant,
) -> QpSolution {
    let mut mu = DVector::zeros(p.a_in.nrows());
    for (j, &i) in active.iter().enumerate() {
        let id = cons[i].id;
        mu[id.row] = match id.side {
            Side::Lower => -u[j],
            Side::Upper => u[j],
        };
    }
    let nu = -u_eq;
    let mut stat = &p.h * &x + &p.g;
    if p.a_eq.nrows() > 0 {
        stat += p.a_eq.transpose() * &nu;
    }
    if p.a_in.nrows() > 0 {
        stat += p.a_in.transpose() * &mu;
    }
    let ax = &p.a_in * &x;
    let mut compl: f64 = 0.0;
    for r in 0..mu.len() {
        let slack = if mu[r] < 0.0 {
            ax[r] - p.lower[r]
        } else {
            p.upper[r] - ax[r]
        };
        if mu[r] != 0.0 {
            compl = compl.max((mu[r] * slack).abs());
        }
    }
    let kkt_residual = stat.amax().max(p.max_violation(&x)).max(compl);
    let mut active_set: Vec<ActiveConstraint> = active.iter().map(|&i| cons[i].id).collect();
    active_set.sort();
    QpSolution {
        objective: p.objective(&x),
        x,
        status,
        active_set,
        eq_multipliers: nu,
        in_multipliers: mu,
        kkt_residual,
        iterations,
        solve_time_us: start.elapsed().as_secs_f64() * 1e6,
    }
}
