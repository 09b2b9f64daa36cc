//! Solver contract for the convex programs the pipeline needs: sparse convex
//! quadratic objective, linear equality and inequality rows, variable boxes,
//! and second-order cones. Pure linear programs are the same structure with
//! an empty quadratic term.
//!
//! The implementation wraps an interior-point conic solver. The contract is
//! accuracy plus determinism: identical problems and settings produce
//! identical results. `deterministic_seed` is part of the settings surface
//! for callers that batch runs; the interior-point backend takes no random
//! decisions, so the seed is recorded but never consumed.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConicError {
    #[error("variable index {0} out of range (n = {1})")]
    IndexOutOfRange(usize, usize),
    #[error("negative cone dimension or malformed cone")]
    MalformedCone,
    #[error("solver setup failed: {0}")]
    Setup(String),
}

/// Linear expression: sum of coef * x\[idx\] plus a constant.
#[derive(Debug, Clone, Default)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn var(idx: usize) -> Self {
        LinExpr { terms: vec![(idx, 1.0)], constant: 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.constant + self.terms.iter().map(|(i, c)| c * x[*i]).sum::<f64>()
    }
}

/// One affine row `terms (+ 0) <= rhs` or `= rhs` depending on the block.
#[derive(Debug, Clone)]
pub struct SparseRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl SparseRow {
    pub fn eval_lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(i, c)| c * x[*i]).sum()
    }
}

/// Epigraph form of a squared norm: `epigraph >= sum_k args[k]^2`, encoded for
/// the solver via the standard second-order-cone lifting
/// (epigraph + 1, epigraph - 1, 2 args).
#[derive(Debug, Clone)]
pub struct QuadCone {
    pub epigraph: LinExpr,
    pub args: Vec<LinExpr>,
}

/// Standard-form problem: minimize 1/2 x'Qx + c'x + constant subject to the
/// equality rows, inequality rows, boxes, and quadratic-epigraph cones.
/// `quad` holds symmetric triplets; either triangle may be supplied and
/// duplicates accumulate.
#[derive(Debug, Clone, Default)]
pub struct ConicProblem {
    pub n: usize,
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub eq: Vec<SparseRow>,
    pub ineq: Vec<SparseRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cones: Vec<QuadCone>,
}

impl ConicProblem {
    pub fn new(n: usize) -> Self {
        ConicProblem {
            n,
            quad: Vec::new(),
            linear: vec![0.0; n],
            constant: 0.0,
            eq: Vec::new(),
            ineq: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            cones: Vec::new(),
        }
    }

    /// Objective value 1/2 x'Qx + c'x + constant at a point.
    pub fn objective_at(&self, x: &[f64]) -> f64 {
        let mut quad = 0.0;
        for &(i, j, v) in &self.quad {
            let term = v * x[i] * x[j];
            quad += if i == j { term } else { 2.0 * term };
        }
        0.5 * quad + self.constant + self.linear.iter().zip(x).map(|(c, xi)| c * xi).sum::<f64>()
    }

    /// Objective gradient Qx + c.
    pub fn gradient_at(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.linear.clone();
        for &(i, j, v) in &self.quad {
            g[i] += v * x[j];
            if i != j {
                g[j] += v * x[i];
            }
        }
        g
    }

    fn check(&self) -> Result<(), ConicError> {
        let bad = |idx: usize| idx >= self.n;
        for &(i, j, _) in &self.quad {
            if bad(i) || bad(j) {
                return Err(ConicError::IndexOutOfRange(i.max(j), self.n));
            }
        }
        for row in self.eq.iter().chain(&self.ineq) {
            for &(i, _) in &row.terms {
                if bad(i) {
                    return Err(ConicError::IndexOutOfRange(i, self.n));
                }
            }
        }
        for cone in &self.cones {
            if cone.args.is_empty() {
                return Err(ConicError::MalformedCone);
            }
            for expr in std::iter::once(&cone.epigraph).chain(&cone.args) {
                for &(i, _) in &expr.terms {
                    if bad(i) {
                        return Err(ConicError::IndexOutOfRange(i, self.n));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveSettings {
    pub eps_abs: f64,
    pub eps_gap: f64,
    pub max_iter: u32,
    /// Recorded for reproducibility bookkeeping; the deterministic
    /// interior-point backend never consumes it.
    pub deterministic_seed: u64,
    pub verbose: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            eps_abs: 1e-8,
            eps_gap: 1e-8,
            max_iter: 200,
            deterministic_seed: 0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Solution report. Dual vectors are split per row block; box duals cover the
/// internally generated bound rows (one lower, one upper per finite bound).
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    /// One dual vector per quadratic cone (lifted three-or-more dimensional).
    pub cone_duals: Vec<Vec<f64>>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub duality_gap: f64,
    pub iterations: u32,
    pub wall_time: std::time::Duration,
    /// Worst complementary-slackness violation over inequality and box rows.
    pub complementarity: f64,
}

struct Triplets {
    m: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
}

impl Triplets {
    fn new() -> Self {
        Triplets { m: 0, rows: Vec::new(), cols: Vec::new(), vals: Vec::new(), b: Vec::new() }
    }

    /// Appends the row s = rhs - terms.x (solver sees A x + s = b).
    fn push_row(&mut self, terms: &[(usize, f64)], rhs: f64) {
        for &(col, val) in terms {
            if val != 0.0 {
                self.rows.push(self.m);
                self.cols.push(col);
                self.vals.push(val);
            }
        }
        self.b.push(rhs);
        self.m += 1;
    }

    fn into_csc(self, n: usize) -> (CscMatrix<f64>, Vec<f64>) {
        let mut order: Vec<usize> = (0..self.vals.len()).collect();
        order.sort_by_key(|&k| (self.cols[k], self.rows[k]));
        let mut colptr = vec![0usize; n + 1];
        let mut rowval = Vec::with_capacity(order.len());
        let mut nzval = Vec::with_capacity(order.len());
        for &k in &order {
            colptr[self.cols[k] + 1] += 1;
            rowval.push(self.rows[k]);
            nzval.push(self.vals[k]);
        }
        for c in 0..n {
            colptr[c + 1] += colptr[c];
        }
        (CscMatrix::new(self.m, n, colptr, rowval, nzval), self.b)
    }
}

/// Upper-triangular CSC of the symmetric quadratic term.
fn quad_csc(n: usize, triplets: &[(usize, usize, f64)]) -> CscMatrix<f64> {
    use std::collections::BTreeMap;
    let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &(i, j, v) in triplets {
        let key = if i <= j { (j, i) } else { (i, j) }; // (col, row) with row <= col
        *acc.entry(key).or_insert(0.0) += v;
    }
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(acc.len());
    let mut nzval = Vec::with_capacity(acc.len());
    for (&(col, row), &v) in &acc {
        colptr[col + 1] += 1;
        rowval.push(row);
        nzval.push(v);
    }
    for c in 0..n {
        colptr[c + 1] += colptr[c];
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

/// Solves a conic problem. Numerical trouble surfaces as `MaxIter` with the
/// residuals filled in, never as a silently wrong `Optimal`.
pub fn solve(problem: &ConicProblem, settings: &SolveSettings) -> Result<SolveResult, ConicError> {
    problem.check()?;
    let n = problem.n;

    let mut tri = Triplets::new();
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();

    for row in &problem.eq {
        tri.push_row(&row.terms, row.rhs);
    }
    if !problem.eq.is_empty() {
        cones.push(SupportedConeT::ZeroConeT(problem.eq.len()));
    }

    let ineq_start = tri.m;
    for row in &problem.ineq {
        tri.push_row(&row.terms, row.rhs);
    }
    // Finite boxes become one-sided rows so their duals stay addressable.
    let mut lower_rows = Vec::new();
    let mut upper_rows = Vec::new();
    for i in 0..n {
        if problem.lower[i].is_finite() {
            lower_rows.push(tri.m);
            tri.push_row(&[(i, -1.0)], -problem.lower[i]);
        }
        if problem.upper[i].is_finite() {
            upper_rows.push(tri.m);
            tri.push_row(&[(i, 1.0)], problem.upper[i]);
        }
    }
    let nonneg_len = tri.m - ineq_start;
    if nonneg_len > 0 {
        cones.push(SupportedConeT::NonnegativeConeT(nonneg_len));
    }

    let mut cone_spans = Vec::new();
    for cone in &problem.cones {
        let start = tri.m;
        // Lifting: (e + 1, e - 1, 2 w) in a second-order cone encodes e >= ||w||^2.
        let e = &cone.epigraph;
        let neg: Vec<(usize, f64)> = e.terms.iter().map(|&(i, c)| (i, -c)).collect();
        tri.push_row(&neg, e.constant + 1.0);
        tri.push_row(&neg, e.constant - 1.0);
        for w in &cone.args {
            let terms: Vec<(usize, f64)> = w.terms.iter().map(|&(i, c)| (i, -2.0 * c)).collect();
            tri.push_row(&terms, 2.0 * w.constant);
        }
        cone_spans.push((start, tri.m));
        cones.push(SupportedConeT::SecondOrderConeT(cone.args.len() + 2));
    }

    let (a, b) = tri.into_csc(n);
    let p = quad_csc(n, &problem.quad);

    let clarabel_settings = DefaultSettingsBuilder::default()
        .verbose(settings.verbose)
        .max_iter(settings.max_iter)
        .tol_feas(settings.eps_abs)
        .tol_gap_abs(settings.eps_gap)
        .tol_gap_rel(settings.eps_gap)
        .build()
        .map_err(|e| ConicError::Setup(e.to_string()))?;

    let start = std::time::Instant::now();
    let mut solver = DefaultSolver::new(&p, &problem.linear, &a, &b, &cones, clarabel_settings)
        .map_err(|e| ConicError::Setup(format!("{e:?}")))?;
    solver.solve();
    let wall_time = start.elapsed();
    let sol = &solver.solution;

    let status = match sol.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::MaxIter,
    };

    let x = sol.x.clone();
    let z = &sol.z;
    let s = &sol.s;
    let eq_len = problem.eq.len();
    let eq_duals = z[..eq_len].to_vec();
    let ineq_duals = z[eq_len..eq_len + problem.ineq.len()].to_vec();
    let mut lower_duals = vec![0.0; n];
    let mut upper_duals = vec![0.0; n];
    for (k, &row) in lower_rows.iter().enumerate() {
        let var = problem
            .lower
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_finite())
            .nth(k)
            .map(|(i, _)| i)
            .unwrap();
        let _ = row;
        lower_duals[var] = z[lower_rows[k]];
    }
    for (k, &row) in upper_rows.iter().enumerate() {
        let var = problem
            .upper
            .iter()
            .enumerate()
            .filter(|(_, u)| u.is_finite())
            .nth(k)
            .map(|(i, _)| i)
            .unwrap();
        let _ = row;
        upper_duals[var] = z[upper_rows[k]];
    }
    let cone_duals = cone_spans.iter().map(|&(a0, b0)| z[a0..b0].to_vec()).collect();

    // Worst z_i * s_i over the nonnegative block.
    let mut complementarity = 0.0f64;
    for k in ineq_start..ineq_start + nonneg_len {
        complementarity = complementarity.max((z[k] * s[k]).abs());
    }

    Ok(SolveResult {
        status,
        x,
        eq_duals,
        ineq_duals,
        lower_duals,
        upper_duals,
        cone_duals,
        objective: sol.obj_val + problem.constant,
        primal_residual: sol.r_prim,
        dual_residual: sol.r_dual,
        duality_gap: (sol.obj_val - sol.obj_val_dual).abs(),
        iterations: sol.iterations,
        wall_time,
        complementarity,
    })
}
