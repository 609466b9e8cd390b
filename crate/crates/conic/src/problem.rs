use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use crate::expr::{AffMat, LinExpr};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConeKind {
    Zero,
    NonNeg,
    Soc,
    Psd(usize),
}

#[derive(Clone, Debug)]
struct ConeBlock {
    kind: ConeKind,
    rows: Vec<LinExpr>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: Status,
    /// True when the solver only reached its reduced accuracy thresholds.
    pub reduced_accuracy: bool,
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
    /// Wall time of the interior-point iterations, seconds.
    pub solve_time: f64,
    /// Wall time including problem assembly, seconds.
    pub total_time: f64,
    /// Solver's own status string, for diagnostics.
    pub detail: String,
}

impl Solution {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    pub fn value(&self, e: &LinExpr) -> f64 {
        e.eval(&self.x)
    }

    pub fn matrix(&self, m: &AffMat) -> DMatrix<f64> {
        m.eval(&self.x)
    }
}

#[derive(Clone, Debug)]
pub struct Settings {
    pub max_iter: u32,
    pub tol_gap_abs: f64,
    pub tol_gap_rel: f64,
    pub tol_feas: f64,
    pub time_limit: f64,
    pub verbose: bool,
    pub static_reg: f64,
    pub equilibrate: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Self { max_iter: 200, tol_gap_abs: 1e-8, tol_gap_rel: 1e-8, tol_feas: 1e-8, time_limit: f64::INFINITY, verbose: false, static_reg: 1e-8, equilibrate: true }
    }
}

impl Settings {
    fn to_clarabel(&self, reusable: bool) -> DefaultSettings<f64> {
        let mut b = DefaultSettingsBuilder::default();
        b.max_iter(self.max_iter)
            .tol_gap_abs(self.tol_gap_abs)
            .tol_gap_rel(self.tol_gap_rel)
            .tol_feas(self.tol_feas)
            .time_limit(self.time_limit)
            .verbose(self.verbose);
        b.static_regularization_constant(self.static_reg).equilibrate_enable(self.equilibrate);
        if reusable {
            b.presolve_enable(false).chordal_decomposition_enable(false);
        }
        b.build().expect("valid solver settings")
    }
}

/// Conic program `min c^T x + x^T W x  s.t.  affine expressions in cones`.
#[derive(Clone, Debug, Default)]
pub struct Problem {
    n: usize,
    objective: LinExpr,
    quad: Vec<(usize, usize, f64)>,
    blocks: Vec<ConeBlock>,
}

/// Standard-form data `min ½x'Px + q'x  s.t.  b - Ax ∈ K`.
pub struct Compiled {
    pub p: CscMatrix<f64>,
    pub q: Vec<f64>,
    pub a: CscMatrix<f64>,
    pub b: Vec<f64>,
    pub cones: Vec<SupportedConeT<f64>>,
    pub obj_constant: f64,
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn num_rows(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    pub fn scalar(&mut self) -> LinExpr {
        self.n += 1;
        LinExpr::var(self.n - 1)
    }

    pub fn vector(&mut self, len: usize) -> Vec<LinExpr> {
        (0..len).map(|_| self.scalar()).collect()
    }

    /// General `rows x cols` matrix variable.
    pub fn matrix(&mut self, rows: usize, cols: usize) -> AffMat {
        let start = self.n;
        self.n += rows * cols;
        AffMat::from_fn(rows, cols, |i, j| LinExpr::var(start + j * rows + i))
    }

    /// Symmetric `n x n` matrix variable with `n(n+1)/2` free entries.
    pub fn symmetric(&mut self, n: usize) -> AffMat {
        let start = self.n;
        self.n += n * (n + 1) / 2;
        AffMat::from_fn(n, n, |i, j| {
            let (r, c) = if i <= j { (i, j) } else { (j, i) };
            LinExpr::var(start + c * (c + 1) / 2 + r)
        })
    }

    pub fn minimize(&mut self, objective: LinExpr) {
        self.objective = objective;
    }

    /// Adds `v^T W v` to the objective where `v` are plain variables (`W` symmetric PSD).
    pub fn add_quadratic(&mut self, vars: &[LinExpr], w: &DMatrix<f64>) {
        let idx: Vec<usize> = vars
            .iter()
            .map(|e| {
                assert!(e.terms.len() == 1 && e.terms[0].1 == 1.0 && e.constant == 0.0, "quadratic terms need plain variables");
                e.terms[0].0
            })
            .collect();
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                let v = w[(a, b)];
                if v != 0.0 && ia <= ib {
                    // P holds 2W because the solver minimizes ½x'Px
                    self.quad.push((ia, ib, 2.0 * v));
                }
            }
        }
    }

    pub fn eq(&mut self, e: LinExpr) {
        self.push(ConeKind::Zero, vec![e]);
    }

    pub fn eq_all(&mut self, es: Vec<LinExpr>) {
        if !es.is_empty() {
            self.push(ConeKind::Zero, es);
        }
    }

    /// `e >= 0`.
    pub fn nonneg(&mut self, e: LinExpr) {
        self.push(ConeKind::NonNeg, vec![e]);
    }

    /// `a <= b`.
    pub fn leq(&mut self, a: &LinExpr, b: &LinExpr) {
        self.nonneg(b.sub(a));
    }

    /// `t >= ||v||_2`.
    pub fn soc(&mut self, t: LinExpr, v: Vec<LinExpr>) {
        let mut rows = Vec::with_capacity(v.len() + 1);
        rows.push(t);
        rows.extend(v);
        self.push(ConeKind::Soc, rows);
    }

    /// `M ⪰ 0` for a square affine matrix; the symmetric part is used.
    pub fn psd(&mut self, m: &AffMat) {
        let n = m.nrows();
        assert_eq!(n, m.ncols(), "psd constraint needs a square matrix");
        let s2 = std::f64::consts::SQRT_2;
        let mut rows = Vec::with_capacity(n * (n + 1) / 2);
        for j in 0..n {
            for i in 0..=j {
                if i == j {
                    rows.push(m.get(i, i).clone());
                } else {
                    rows.push(crate::expr::lin_comb([(0.5 * s2, m.get(i, j)), (0.5 * s2, m.get(j, i))]));
                }
            }
        }
        if n == 1 {
            self.push(ConeKind::NonNeg, rows);
        } else {
            self.push(ConeKind::Psd(n), rows);
        }
    }

    fn push(&mut self, kind: ConeKind, rows: Vec<LinExpr>) {
        for r in &rows {
            debug_assert!(r.terms.iter().all(|t| t.0 < self.n), "expression references unknown variable");
        }
        self.blocks.push(ConeBlock { kind, rows });
    }

    pub fn compile(&self) -> Compiled {
        let n = self.n;
        let m = self.num_rows();
        let mut q = vec![0.0; n];
        for &(i, c) in &self.objective.terms {
            q[i] += c;
        }
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut b = Vec::with_capacity(m);
        let mut cones = Vec::new();
        let mut row = 0;
        // merge consecutive zero / nonneg blocks into single cones
        let mut pending: Option<(ConeKind, usize)> = None;
        let flush = |pending: &mut Option<(ConeKind, usize)>, cones: &mut Vec<SupportedConeT<f64>>| {
            if let Some((k, len)) = pending.take() {
                cones.push(match k {
                    ConeKind::Zero => SupportedConeT::ZeroConeT(len),
                    ConeKind::NonNeg => SupportedConeT::NonnegativeConeT(len),
                    _ => unreachable!(),
                });
            }
        };
        for blk in &self.blocks {
            for e in &blk.rows {
                let mut e = e.clone();
                e.compress();
                for &(j, c) in &e.terms {
                    trip.push((row, j, -c));
                }
                b.push(e.constant);
                row += 1;
            }
            let len = blk.rows.len();
            match blk.kind {
                ConeKind::Zero | ConeKind::NonNeg => match &mut pending {
                    Some((k, l)) if *k == blk.kind => *l += len,
                    _ => {
                        flush(&mut pending, &mut cones);
                        pending = Some((blk.kind, len));
                    }
                },
                ConeKind::Soc => {
                    flush(&mut pending, &mut cones);
                    cones.push(SupportedConeT::SecondOrderConeT(len));
                }
                ConeKind::Psd(d) => {
                    flush(&mut pending, &mut cones);
                    cones.push(SupportedConeT::PSDTriangleConeT(d));
                }
            }
        }
        flush(&mut pending, &mut cones);
        let a = csc_from_triplets(m, n, trip);
        let p = csc_from_triplets(n, n, self.quad.clone());
        Compiled { p, q, a, b, cones, obj_constant: self.objective.constant }
    }

    pub fn solve(&self) -> Solution {
        self.solve_with(&Settings::default())
    }

    pub fn solve_with(&self, settings: &Settings) -> Solution {
        let t0 = Instant::now();
        let c = self.compile();
        let mut solver = match DefaultSolver::new(&c.p, &c.q, &c.a, &c.b, &c.cones, settings.to_clarabel(false)) {
            Ok(s) => s,
            Err(_) => return failed(self.n, t0),
        };
        solver.solve();
        convert(&solver, c.obj_constant, t0)
    }
}

impl Problem {
    /// Like [`Problem::solve_with`], retrying factorization failures and reduced-accuracy
    /// terminations with stronger static regularization and then without equilibration.
    pub fn solve_retrying(&self, settings: &Settings) -> Solution {
        let mut sol = self.solve_with(settings);
        let fallbacks = [
            Settings { static_reg: settings.static_reg.max(1e-7), ..settings.clone() },
            Settings { equilibrate: false, ..settings.clone() },
            Settings { static_reg: settings.static_reg.max(1e-6), equilibrate: false, ..settings.clone() },
        ];
        let done = |s: &Solution| s.status != Status::NumericalFailure && !s.reduced_accuracy;
        for s in fallbacks {
            if done(&sol) {
                break;
            }
            let next = self.solve_with(&s);
            // keep a reduced-accuracy answer unless the retry does strictly better
            if sol.status == Status::NumericalFailure || done(&next) {
                sol = next;
            }
        }
        sol
    }
}

fn failed(n: usize, t0: Instant) -> Solution {
    Solution {
        status: Status::NumericalFailure,
        reduced_accuracy: false,
        x: vec![f64::NAN; n],
        objective: f64::NAN,
        iterations: 0,
        solve_time: 0.0,
        total_time: t0.elapsed().as_secs_f64(),
        detail: "setup failed".into(),
    }
}

fn convert(solver: &DefaultSolver<f64>, obj_constant: f64, t0: Instant) -> Solution {
    let s = &solver.solution;
    let (status, reduced) = match s.status {
        SolverStatus::Solved => (Status::Optimal, false),
        SolverStatus::AlmostSolved => (Status::Optimal, true),
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => (Status::Infeasible, false),
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => (Status::Unbounded, false),
        _ => (Status::NumericalFailure, false),
    };
    Solution {
        status,
        reduced_accuracy: reduced,
        x: s.x.clone(),
        objective: s.obj_val + obj_constant,
        iterations: s.iterations,
        solve_time: s.solve_time,
        total_time: t0.elapsed().as_secs_f64(),
        detail: format!("{:?}", s.status),
    }
}

fn csc_from_triplets(m: usize, n: usize, mut trip: Vec<(usize, usize, f64)>) -> CscMatrix<f64> {
    trip.sort_unstable_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = vec![0usize; n + 1];
    let mut rowval = Vec::with_capacity(trip.len());
    let mut nzval: Vec<f64> = Vec::with_capacity(trip.len());
    let mut last: Option<(usize, usize)> = None;
    for (r, c, v) in trip {
        if last == Some((r, c)) {
            *nzval.last_mut().unwrap() += v;
            continue;
        }
        last = Some((r, c));
        colptr[c + 1] += 1;
        rowval.push(r);
        nzval.push(v);
    }
    for j in 0..n {
        colptr[j + 1] += colptr[j];
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}

/// Solver object kept alive across problems that share `P`, `A` and the cone layout and differ
/// only in `q`, `b` and constants.
pub struct ReusableSolver {
    solver: DefaultSolver<f64>,
    n: usize,
    m: usize,
    nnz_a: usize,
}

impl ReusableSolver {
    pub fn new(problem: &Problem, settings: &Settings) -> Option<Self> {
        let c = problem.compile();
        let solver = DefaultSolver::new(&c.p, &c.q, &c.a, &c.b, &c.cones, settings.to_clarabel(true)).ok()?;
        Some(Self { solver, n: c.q.len(), m: c.b.len(), nnz_a: c.a.nzval.len() })
    }

    /// Solves `problem`, whose structure must match the one used at construction.
    pub fn solve(&mut self, problem: &Problem) -> Solution {
        let t0 = Instant::now();
        let c = problem.compile();
        assert!(
            c.q.len() == self.n && c.b.len() == self.m && c.a.nzval.len() == self.nnz_a,
            "problem structure changed"
        );
        if self.solver.update_q(&c.q).is_err()
            || self.solver.update_b(&c.b).is_err()
            || self.solver.update_A(&c.a.nzval).is_err()
            || self.solver.update_P(&c.p.nzval).is_err()
        {
            return failed(self.n, t0);
        }
        self.solver.solve();
        convert(&self.solver, c.obj_constant, t0)
    }
}
