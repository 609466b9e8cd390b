//! Receding-horizon controller: per-step tube MPC problem, warm structure reuse and the
//! shifted-candidate fallback.

use std::fmt;

use conic::{lin_comb, AffMat, LinExpr, Problem, ReusableSolver, Settings, Status};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::mpcdesign::MpcDesign;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TubeMode {
    /// Second-order cone tube update through `Σ̄_J^{1/2}`.
    Soc,
    /// Exact maximum-singular-value update, posed as a semidefinite constraint.
    Lmi,
}

impl fmt::Display for TubeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TubeMode::Soc => "soc",
            TubeMode::Lmi => "lmi",
        })
    }
}

impl std::str::FromStr for TubeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soc" => Ok(TubeMode::Soc),
            "lmi" => Ok(TubeMode::Lmi),
            _ => invalid(format!("unknown tube mode `{s}` (expected soc or lmi)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcState {
    #[serde(with = "crate::serde_mat::vector")]
    pub x_c: Vector,
    pub alpha_next: f64,
    #[serde(with = "crate::serde_mat::vector")]
    pub xi_bar_next: Vector,
    pub t: usize,
}

impl MpcState {
    /// Initial state: controller state and nominal prediction at the mean, zero tube.
    pub fn initial(design: &MpcDesign) -> Self {
        let nx = design.n() / 2;
        MpcState { x_c: design.mu_xi0.rows(nx, nx).into_owned(), alpha_next: 0.0, xi_bar_next: design.mu_xi0.clone(), t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcpStatus {
    Optimal,
    /// Solver failed; the shifted previous solution was applied instead.
    ShiftedCandidate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    #[serde(with = "crate::mpcdesign::vectors")]
    pub nu: Vec<Vector>,
    #[serde(with = "crate::mpcdesign::vectors")]
    pub xi_bar: Vec<Vector>,
    pub alpha: Vec<f64>,
    pub objective: f64,
    pub status: OcpStatus,
    /// Interior-point time, seconds.
    pub solve_time: f64,
    /// Including problem assembly, seconds.
    pub total_time: f64,
}

struct Vars {
    nu: Vec<Vec<LinExpr>>,
    xb: Vec<Vec<LinExpr>>,
}

fn affine(m: &Mat, v: &[LinExpr]) -> Vec<LinExpr> {
    (0..m.nrows()).map(|i| lin_comb((0..m.ncols()).filter(|&k| m[(i, k)] != 0.0).map(|k| (m[(i, k)], &v[k])))).collect()
}

fn add(a: &[LinExpr], b: &[LinExpr]) -> Vec<LinExpr> {
    a.iter().zip(b).map(|(x, y)| x.add(y)).collect()
}

/// `Ξ ξ̄ + [0; ν]`.
fn z_expr(d: &MpcDesign, xb: &[LinExpr], nu: &[LinExpr]) -> Vec<LinExpr> {
    let mut z = affine(&d.xi, xb);
    let nx = z.len() - nu.len();
    for (k, e) in nu.iter().enumerate() {
        z[nx + k] = z[nx + k].add(e);
    }
    z
}

/// The online problem at time `t` from the carried pair `(ξ̄_0, α_0)`.
fn build(d: &MpcDesign, mode: TubeMode, xi0: &Vector, alpha0: f64, t: usize) -> (Problem, Vars) {
    let (n, nu, tt) = (d.n(), d.nu(), d.horizon);
    let mut prob = Problem::new();
    let nu_v: Vec<Vec<LinExpr>> = (0..tt).map(|_| prob.vector(nu)).collect();
    let xb: Vec<Vec<LinExpr>> = (0..=tt).map(|_| prob.vector(n)).collect();
    let al: Vec<LinExpr> = (0..=tt).map(|_| prob.scalar()).collect();

    prob.eq_all(xb[0].iter().enumerate().map(|(k, e)| e.clone().plus_const(-xi0[k])).collect());
    prob.eq(al[0].clone().plus_const(-alpha0));
    for i in 0..tt {
        let next = add(&affine(&d.a_cal, &xb[i]), &affine(&d.b_nu, &nu_v[i]));
        prob.eq_all(xb[i + 1].iter().zip(&next).map(|(a, b)| a.sub(b)).collect());
        let z = z_expr(d, &xb[i], &nu_v[i]);
        let s = al[i + 1].sub(&al[i].scale(d.rho));
        match mode {
            TubeMode::Soc => prob.soc(s, affine(&d.sigma_j_half, &z)),
            TubeMode::Lmi => {
                let (r, c) = d.tube_factors[0].shape();
                let g = AffMat::from_fn(r, c, |a, b| lin_comb(z.iter().zip(&d.tube_factors).filter(|(_, f)| f[(a, b)] != 0.0).map(|(e, f)| (f[(a, b)], e))));
                let blk = AffMat::block(&[vec![AffMat::scaled_identity(r, &s), g.clone()], vec![g.transpose(), AffMat::scaled_identity(c, &s)]]);
                prob.psd(&blk);
            }
        }
        for (j, h) in d.constraints.h.iter().enumerate() {
            let lhs = lin_comb(z.iter().enumerate().filter(|(k, _)| h[*k] != 0.0).map(|(k, e)| (h[k], e))).add(&al[i].scale(d.f[j]));
            prob.leq(&lhs, &LinExpr::constant(1.0 - d.c_at(j, t + i)));
        }
    }
    let ph = linalg::psd_sqrt(&d.p);
    let pt = affine(&ph, &xb[tt]);
    prob.soc(al[tt].scale(-1.0).plus_const(d.terminal.c_lower), pt.clone());
    if d.terminal.sigma_bar > 0.0 {
        prob.soc(LinExpr::constant((1.0 - d.rho) * d.terminal.c_lower / d.terminal.sigma_bar), pt);
    }
    for i in 0..tt {
        prob.add_quadratic(&xb[i], &d.q_xi);
        prob.add_quadratic(&nu_v[i], &d.r_c);
    }
    prob.add_quadratic(&xb[tt], &d.terminal.s_xi_c);
    (prob, Vars { nu: nu_v, xb })
}

/// `Σ ‖ξ̄_i‖²_Q + ‖ν_i‖²_R + ‖ξ̄_T‖²_S`.
pub fn ocp_cost(d: &MpcDesign, xi_bar: &[Vector], nu: &[Vector]) -> f64 {
    let q = |m: &Mat, v: &Vector| v.dot(&(m * v));
    let tt = nu.len();
    (0..tt).map(|i| q(&d.q_xi, &xi_bar[i]) + q(&d.r_c, &nu[i])).sum::<f64>() + q(&d.terminal.s_xi_c, &xi_bar[tt])
}

pub fn tube_increment(d: &MpcDesign, mode: TubeMode, z: &Vector) -> f64 {
    match mode {
        TubeMode::Soc => d.tube_increment_soc(z),
        TubeMode::Lmi => d.tube_increment_lmi(z),
    }
}

/// Smallest tube sizes compatible with the tube update along a given input sequence.
pub fn tube_trace(d: &MpcDesign, mode: TubeMode, xi0: &Vector, alpha0: f64, nu: &[Vector]) -> (Vec<Vector>, Vec<f64>) {
    let mut xs = vec![xi0.clone()];
    let mut al = vec![alpha0];
    for v in nu {
        let x = xs.last().unwrap();
        let z = d.z_of(x, v);
        al.push(d.rho * al.last().unwrap() + tube_increment(d, mode, &z));
        xs.push(&d.a_cal * x + &d.b_nu * v);
    }
    (xs, al)
}

/// Constraint residuals of a candidate trajectory for the problem at time `t`; the maximum
/// violation (≤ 0 means feasible) and the individual slacks.
#[derive(Clone, Debug, Default)]
pub struct Residuals {
    pub dynamics: f64,
    pub tube: f64,
    pub constraints: f64,
    pub terminal: f64,
}

impl Residuals {
    pub fn worst(&self) -> f64 {
        self.dynamics.max(self.tube).max(self.constraints).max(self.terminal)
    }
}

pub fn residuals(d: &MpcDesign, mode: TubeMode, sol: &OcpSolution, t: usize) -> Residuals {
    let tt = sol.nu.len();
    let mut r = Residuals { dynamics: 0.0, tube: f64::NEG_INFINITY, constraints: f64::NEG_INFINITY, terminal: f64::NEG_INFINITY };
    for i in 0..tt {
        let pred = &d.a_cal * &sol.xi_bar[i] + &d.b_nu * &sol.nu[i];
        r.dynamics = r.dynamics.max((&sol.xi_bar[i + 1] - pred).amax());
        let z = d.z_of(&sol.xi_bar[i], &sol.nu[i]);
        r.tube = r.tube.max(d.rho * sol.alpha[i] + tube_increment(d, mode, &z) - sol.alpha[i + 1]);
        for (j, h) in d.constraints.h.iter().enumerate() {
            r.constraints = r.constraints.max(h.dot(&z) + sol.alpha[i] * d.f[j] - (1.0 - d.c_at(j, t + i)));
        }
    }
    let (s1, s2) = d.terminal.slacks(&d.p, d.rho, &sol.xi_bar[tt], sol.alpha[tt]);
    r.terminal = if d.terminal.sigma_bar > 0.0 { (-s1).max(-s2) } else { -s1 };
    r
}

/// The previous solution shifted by one step and extended with `ν = 0`.
pub fn shifted_candidate(d: &MpcDesign, mode: TubeMode, prev: &OcpSolution) -> OcpSolution {
    let tt = prev.nu.len();
    let mut nu: Vec<Vector> = prev.nu[1..].to_vec();
    nu.push(Vector::zeros(d.nu()));
    let mut xi_bar: Vec<Vector> = prev.xi_bar[1..].to_vec();
    let last = &prev.xi_bar[tt];
    xi_bar.push(&d.a_cal * last);
    let mut alpha: Vec<f64> = prev.alpha[1..].to_vec();
    let z = d.z_of(last, &Vector::zeros(d.nu()));
    alpha.push(d.rho * prev.alpha[tt] + tube_increment(d, mode, &z));
    let objective = ocp_cost(d, &xi_bar, &nu);
    OcpSolution { nu, xi_bar, alpha, objective, status: OcpStatus::ShiftedCandidate, solve_time: 0.0, total_time: 0.0 }
}

/// Tolerance used when checking the shifted candidate in verification mode.
pub const CANDIDATE_TOL: f64 = 1e-6;

pub struct MpcController {
    pub design: MpcDesign,
    pub mode: TubeMode,
    solver: Option<ReusableSolver>,
    settings: Settings,
    last: Option<OcpSolution>,
    /// Verify the shifted candidate of the previous step before each solve.
    pub check_candidates: bool,
    pub fallbacks: usize,
    /// Largest candidate residual seen in verification mode.
    pub worst_candidate: f64,
}

impl MpcController {
    pub fn new(design: MpcDesign, mode: TubeMode) -> Result<Self> {
        if design.horizon == 0 || design.tube_factors.is_empty() {
            return invalid("design has no horizon or tube factors");
        }
        Ok(MpcController { design, mode, solver: None, settings: Settings::default(), last: None, check_candidates: false, fallbacks: 0, worst_candidate: f64::NEG_INFINITY })
    }

    /// Solves the problem at `t` from the carried pair, without touching any state.
    pub fn solve_ocp(&mut self, xi0: &Vector, alpha0: f64, t: usize) -> Result<OcpSolution> {
        let t0 = std::time::Instant::now();
        let d = &self.design;
        if xi0.len() != d.n() || !(alpha0 >= 0.0) {
            return invalid("carried nominal state has the wrong size or negative tube size");
        }
        let (prob, vars) = build(d, self.mode, xi0, alpha0, t);
        if self.solver.is_none() {
            self.solver = ReusableSolver::new(&prob, &self.settings);
        }
        let sol = match self.solver.as_mut() {
            Some(s) => s.solve(&prob),
            None => prob.solve_with(&self.settings),
        };
        let sol = if sol.status == Status::NumericalFailure || sol.reduced_accuracy { prob.solve_retrying(&self.settings) } else { sol };
        match sol.status {
            Status::Optimal => {}
            Status::Infeasible | Status::Unbounded => return Err(Error::Infeasible(format!("MPC problem infeasible at t = {t}"))),
            Status::NumericalFailure => return Err(Error::Solver(format!("MPC problem failed at t = {t} ({})", sol.detail))),
        }
        let vec_of = |es: &[LinExpr]| Vector::from_iterator(es.len(), es.iter().map(|e| sol.value(e)));
        let nu: Vec<Vector> = vars.nu.iter().map(|v| vec_of(v)).collect();
        let xi_bar: Vec<Vector> = vars.xb.iter().map(|v| vec_of(v)).collect();
        // α carries no cost, so the solver's values are not unique; the tight trace along the
        // optimal inputs is feasible whenever they are and makes the carried tube well defined
        let (_, alpha) = tube_trace(d, self.mode, &xi_bar[0], alpha0, &nu);
        let objective = ocp_cost(d, &xi_bar, &nu);
        Ok(OcpSolution { nu, xi_bar, alpha, objective, status: OcpStatus::Optimal, solve_time: sol.solve_time, total_time: t0.elapsed().as_secs_f64() })
    }

    /// One closed-loop step with measurement `y_t`: returns the applied input, the problem
    /// solution and the next state.
    pub fn step(&mut self, state: &MpcState, y: &Vector) -> Result<(Vector, OcpSolution, MpcState)> {
        let (nx, ny) = (self.design.controller.a_c.nrows(), self.design.controller.l.ncols());
        if state.x_c.len() != nx || y.len() != ny {
            return invalid("controller state or measurement has the wrong size");
        }
        if self.check_candidates {
            if let Some(prev) = &self.last {
                let cand = shifted_candidate(&self.design, self.mode, prev);
                let w = residuals(&self.design, self.mode, &cand, state.t).worst();
                self.worst_candidate = self.worst_candidate.max(w);
            }
        }
        let sol = match self.solve_ocp(&state.xi_bar_next, state.alpha_next, state.t) {
            Ok(s) => s,
            Err(e) => match &self.last {
                Some(prev) => {
                    self.fallbacks += 1;
                    eprintln!("warning: {e}; applying the shifted candidate (recursive feasibility violated numerically)");
                    shifted_candidate(&self.design, self.mode, prev)
                }
                None => return Err(e),
            },
        };
        let c = &self.design.controller;
        let u = &c.k * &state.x_c + &sol.nu[0];
        let x_c = &c.a_c * &state.x_c + &c.l * y;
        let next = MpcState { x_c, alpha_next: sol.alpha[1], xi_bar_next: sol.xi_bar[1].clone(), t: state.t + 1 };
        self.last = Some(sol.clone());
        Ok((u, sol, next))
    }
}

/// Nominal input corrections `ν_{0|t}` for `t = 0..steps`. The online problem only depends on
/// carried nominal quantities, so this sequence is the same for every noise realization.
pub fn plan(design: &MpcDesign, mode: TubeMode, steps: usize) -> Result<(Vec<Vector>, Vec<OcpSolution>, usize)> {
    let mut ctrl = MpcController::new(design.clone(), mode)?;
    let mut state = MpcState::initial(design);
    let y = Vector::zeros(design.controller.l.ncols());
    let mut nus = Vec::with_capacity(steps);
    let mut sols = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (_, sol, next) = ctrl.step(&state, &y)?;
        nus.push(sol.nu[0].clone());
        sols.push(sol);
        state = next;
    }
    Ok((nus, sols, ctrl.fallbacks))
}
