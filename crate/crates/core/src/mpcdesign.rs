//! Offline ingredients of the tube MPC: tube shape and contraction rate, robust error
//! covariance bounds, constraint tightenings, terminal set and terminal weight.

use conic::{lin_comb, AffMat, LinExpr, Problem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lfr::{self, ClosedLoopLfr, Controller, OpenLoopLfr, PerformanceSpec};
use crate::linalg::{self, Mat, Vector};
use crate::model::{StructuredModel, FORMAT_VERSION};
use crate::serde_mat;
use crate::synth::{self, MultiplierMode, UncertaintyChannel, CERT_SLACK, MARGIN};
use crate::uq::{normal_quantile, UncertaintyEllipsoid};

/// Half-space chance constraints `Pr[h_jᵀ (x, u) ≤ 1] ≥ p_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub version: u32,
    #[serde(with = "vectors")]
    pub h: Vec<Vector>,
    pub p: Vec<f64>,
}

pub(crate) mod vectors {
    use super::Vector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(vs: &[Vector], s: S) -> Result<S::Ok, S::Error> {
        vs.iter().map(|v| v.as_slice().to_vec()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vector>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(d)?.into_iter().map(Vector::from_vec).collect())
    }
}

impl ConstraintSpec {
    pub fn new(h: Vec<Vector>, p: Vec<f64>) -> Result<Self> {
        let c = ConstraintSpec { version: FORMAT_VERSION, h, p };
        if c.h.is_empty() || c.h.len() != c.p.len() {
            return invalid("need at least one constraint and one probability level per constraint");
        }
        if c.p.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return invalid("probability levels must lie in (0,1)");
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn validate(&self, nz: usize) -> Result<()> {
        if self.h.iter().any(|h| h.len() != nz) {
            return invalid(format!("constraint vectors must have length n_x + n_u = {nz}"));
        }
        Self::new(self.h.clone(), self.p.clone()).map(|_| ())
    }

    /// Symmetric bounds `|x_i| ≤ b` and `|u_k| ≤ b`, each at level `p`.
    pub fn boxes(nx: usize, nu: usize, state: &[(usize, f64)], input: &[(usize, f64)], p: f64) -> Result<Self> {
        let mut h = Vec::new();
        for (off, list) in [(0, state), (nx, input)] {
            for &(i, b) in list {
                if !(b > 0.0) {
                    return invalid("bounds must be positive");
                }
                for sign in [1.0, -1.0] {
                    let mut v = Vector::zeros(nx + nu);
                    v[off + i] = sign / b;
                    h.push(v);
                }
            }
        }
        let n = h.len();
        Self::new(h, vec![p; n])
    }

    /// Velocity bounds on every mass and bounds on every force of an `n`-mass chain.
    pub fn chain(n: usize, v_max: f64, u_max: f64, p: f64) -> Result<Self> {
        let vel: Vec<(usize, f64)> = (0..n).map(|i| (n + i, v_max)).collect();
        let inp: Vec<(usize, f64)> = (0..n).map(|i| (i, u_max)).collect();
        Self::boxes(2 * n, n, &vel, &inp, p)
    }
}

/// `Ξᵀ h_j` for every constraint.
fn projected(cons: &ConstraintSpec, xi: &Mat) -> Vec<Vector> {
    cons.h.iter().map(|h| xi.transpose() * h).collect()
}

/// `vᵀ X v` as a linear expression in the entries of `X`.
fn quad_form(x: &AffMat, v: &Vector) -> LinExpr {
    let n = v.len();
    lin_comb((0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|&(i, j)| v[i] != 0.0 && v[j] != 0.0).map(|(i, j)| (v[i] * v[j], x.get(i, j))))
}

fn cst(m: &Mat) -> AffMat {
    AffMat::from_const(m)
}

/// Full-block channel `(I ⊗ Σ_δ^{1/2}) J_Δ` for an arbitrary factor of the parameter set
/// (zero for a nominal design).
pub fn channel(open: &OpenLoopLfr, sigma_half: &Mat) -> UncertaintyChannel {
    let left = linalg::eye(open.nw()).kronecker(sigma_half) * &open.j_delta;
    UncertaintyChannel { mode: MultiplierMode::FullBlock, left, nw: open.nw(), ntheta: open.ntheta(), overapprox: None }
}

fn is_nominal(unc: &UncertaintyChannel) -> bool {
    unc.left.amax() == 0.0
}

/// `[[A Σ Aᵀ - Σ' + B Bᵀ + B_p Λ B_pᵀ, A Σ C̃ᵀ], [⋆, C̃ Σ C̃ᵀ - Π]]` (constant form, for checks).
fn robust_step(a: &Mat, bp: &Mat, bb: &Mat, ct: &Mat, s: &Mat, s_next: &Mat, unc: &UncertaintyChannel, lam: Option<&Mat>) -> Mat {
    let mut b11 = a * s * a.transpose() - s_next + bb;
    let Some(lam) = lam else { return linalg::sym(&b11) };
    b11 += bp * lam * bp.transpose();
    let b12 = a * s * ct.transpose();
    let b22 = ct * s * ct.transpose() - unc.pi_const(lam);
    linalg::sym(&linalg::vstack(&[&linalg::hstack(&[&b11, &b12]), &linalg::hstack(&[&b12.transpose(), &b22])]))
}

/// Affine version of [`robust_step`]; returns the matrix that must be negative definite.
fn robust_step_aff(prob: &mut Problem, a: &Mat, bp: &Mat, bb: &Mat, ct: &Mat, s: &AffMat, s_next: &AffMat, unc: &UncertaintyChannel) -> (AffMat, Option<AffMat>) {
    let b11 = s.congruence(a).sub(s_next).add_const(bb);
    if is_nominal(unc) {
        return (b11.symmetrize(), None);
    }
    let lam = unc.multiplier(prob);
    let nl = lam.nrows();
    prob.psd(&lam.add_const(&(-linalg::eye(nl) * MARGIN)));
    let b11 = b11.add(&lam.congruence(bp));
    let b12 = s.left_mul(a).right_mul(&ct.transpose());
    let b22 = s.congruence(ct).sub(&unc.pi(&lam));
    (AffMat::block(&[vec![b11, b12.clone()], vec![b12.transpose(), b22]]).symmetrize(), Some(lam))
}

fn neg_def(prob: &mut Problem, m: &AffMat, margin: f64) {
    let n = m.nrows();
    prob.psd(&m.scale(-1.0).add_const(&(-linalg::eye(n) * margin)));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub rho: f64,
    /// `Σ γ_i` if the tube SDP was feasible at this rate.
    pub objective: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TubeDesign {
    /// `𝒫 = 𝒳_P^{-1}`.
    pub p: Mat,
    pub x_p: Mat,
    pub rho: f64,
    pub lambda: Option<Mat>,
    /// Epigraph values `γ_i ≥ f_i²`.
    pub gamma: Vec<f64>,
    pub grid: Vec<GridPoint>,
    /// Largest eigenvalue of the re-verified contraction LMI (normalized units).
    pub lmi_max_eig: f64,
}

/// `n` log-spaced rates in `[ρ_nom + 0.01, 0.999]`.
pub fn rho_grid(rho_nom: f64, n: usize) -> Vec<f64> {
    let lo = (rho_nom + 0.01).min(0.998);
    let hi: f64 = 0.999;
    if n <= 1 {
        return vec![hi];
    }
    (0..n).map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp()).collect()
}

/// `Lᵀ Jᵀ (Ξ ⊗ B_pᵀ)`, the thin factor behind the normalization block.
fn normalization_factor(clfr: &ClosedLoopLfr, j: &Mat, sigma_half: &Mat) -> Mat {
    sigma_half.transpose() * j.transpose() * clfr.xi.kronecker(&clfr.b_p.transpose())
}

struct RhoSolve {
    y: Mat,
    lam: Option<Mat>,
    objective: f64,
    kappa: f64,
    lmi_max_eig: f64,
}

/// Tube SDP at a fixed rate, in the variable `Y = 𝒳_P / κ`.
fn tube_at(clfr: &ClosedLoopLfr, unc: &UncertaintyChannel, k12: &Mat, hx: &[Vector], rho: f64) -> Result<RhoSolve> {
    let n = clfr.n();
    let (a, bp) = (&clfr.a_cal, &clfr.b_p);
    let ct = &unc.left * &clfr.xi;
    let zero = Mat::zeros(n, n);
    let knorm = linalg::sigma_max(k12);
    let nominal = knorm == 0.0;
    let kappa = if nominal { 1.0 } else { knorm * knorm / ((1.0 - rho) * (1.0 - rho)) };

    let mut prob = Problem::new();
    let y = prob.symmetric(n);
    let y_next = y.scale(rho * rho);
    let (lmi, lam) = robust_step_aff(&mut prob, a, bp, &zero, &ct, &y, &y_next, unc);
    neg_def(&mut prob, &lmi, MARGIN);
    prob.psd(&y.add_const(&(-linalg::eye(n) * MARGIN)));
    if nominal {
        prob.psd(&y.add_const(&(-linalg::eye(n))));
    } else {
        let kh = k12 / knorm;
        let m = kh.ncols() / n;
        let mut diag: Vec<Vec<AffMat>> = Vec::with_capacity(m);
        for r in 0..m {
            diag.push((0..m).map(|c| if r == c { y.clone() } else { AffMat::zeros(n, n) }).collect());
        }
        let iy = AffMat::block(&diag);
        let top = cst(&kh);
        let blk = AffMat::block(&[vec![AffMat::identity(kh.nrows()), top.clone()], vec![top.transpose(), iy]]);
        prob.psd(&blk);
    }
    let qs: Vec<LinExpr> = hx.iter().map(|v| quad_form(&y, v)).collect();
    prob.minimize(lin_comb(qs.iter().map(|e| (1.0, e))));
    let sol = synth::solve(&prob, "tube")?;
    let yv = linalg::sym(&sol.matrix(&y));
    let lv = lam.as_ref().map(|l| linalg::sym(&sol.matrix(l)));
    let check = robust_step(a, bp, &zero, &ct, &yv, &(&yv * (rho * rho)), unc, lv.as_ref());
    let lmi_max_eig = linalg::max_eig(&check);
    if lmi_max_eig > CERT_SLACK || linalg::min_eig(&yv) <= 0.0 || lv.as_ref().is_some_and(|l| linalg::min_eig(l) <= 0.0) {
        return Err(Error::Numerical(format!("tube certificate failed re-verification at rho = {rho:.4} (max eig {lmi_max_eig:.3e})")));
    }
    let objective = hx.iter().map(|v| v.dot(&(&yv * v))).sum::<f64>() * kappa;
    Ok(RhoSolve { y: yv, lam: lv, objective, kappa, lmi_max_eig })
}

/// Line search over the contraction rate; every grid point is an independent SDP.
pub fn design_tube(clfr: &ClosedLoopLfr, unc: &UncertaintyChannel, j: &Mat, sigma_half: &Mat, cons: &ConstraintSpec, grid: &[f64]) -> Result<TubeDesign> {
    cons.validate(clfr.xi.nrows())?;
    if grid.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        return invalid("contraction rates must lie in (0,1)");
    }
    let hx = projected(cons, &clfr.xi);
    let k12 = normalization_factor(clfr, j, sigma_half);
    let sols: Vec<Option<RhoSolve>> = grid.par_iter().map(|&rho| tube_at(clfr, unc, &k12, &hx, rho).ok()).collect();
    let points: Vec<GridPoint> = grid.iter().zip(&sols).map(|(&rho, s)| GridPoint { rho, objective: s.as_ref().map(|s| s.objective) }).collect();
    let best = sols
        .iter()
        .enumerate()
        .filter_map(|(k, s)| s.as_ref().map(|s| (k, s)))
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective))
        .ok_or_else(|| Error::Infeasible("no common Lyapunov tube for the uncertainty set".into()))?;
    let (k, s) = best;
    let x_p = &s.y * s.kappa;
    let p = linalg::inv_spd(&x_p).ok_or_else(|| Error::Numerical("tube shape is singular".into()))?;
    let gamma = hx.iter().map(|v| v.dot(&(&x_p * v))).collect();
    let lambda = s.lam.as_ref().map(|l| l * s.kappa);
    Ok(TubeDesign { p, x_p, rho: grid[k], lambda, gamma, grid: points, lmi_max_eig: s.lmi_max_eig })
}

#[derive(Clone, Debug)]
pub struct CovarianceDesign {
    /// `Σ̄_{ξ,0..N}`.
    pub sigma_bar: Vec<Mat>,
    /// Bound valid for every `t ≥ N` (equal to `Σ̄_{ξ,N}`).
    pub stationary: Mat,
    pub lambdas: Vec<Mat>,
    pub lmi_max_eig: f64,
}

/// Relative weight of the trace regularizer in the covariance SDP.
const COV_TRACE_REG: f64 = 1e-4;
/// Strictness of the covariance LMIs; the long chain of coupled blocks loses more accuracy in the
/// solver than the single tube LMI does.
const COV_MARGIN: f64 = 1e-6;

/// Robust bounds on the error covariance for `t = 0..N`, with a stationarity condition at `N`.
pub fn design_error_covariance(clfr: &ClosedLoopLfr, unc: &UncertaintyChannel, cons: &ConstraintSpec, sigma_xi0: &Mat, n_steps: usize) -> Result<CovarianceDesign> {
    let n = clfr.n();
    cons.validate(clfr.xi.nrows())?;
    if sigma_xi0.shape() != (n, n) || linalg::min_eig(sigma_xi0) < -1e-12 {
        return invalid("initial error covariance must be PSD of the closed-loop size");
    }
    if is_nominal(unc) {
        return nominal_covariance(clfr, sigma_xi0, n_steps);
    }
    let s = linalg::max_eig(&(&clfr.b_d * clfr.b_d.transpose())).max(f64::MIN_POSITIVE);
    let bb = &clfr.b_d * clfr.b_d.transpose() / s;
    let (a, bp) = (&clfr.a_cal, &clfr.b_p);
    let ct = &unc.left * &clfr.xi;
    let hx = projected(cons, &clfr.xi);
    let q2: Vec<f64> = cons.p.iter().map(|&p| normal_quantile(p).powi(2)).collect();
    let wsum: f64 = hx.iter().zip(&q2).map(|(v, q)| q * v.norm_squared()).sum::<f64>() / hx.len() as f64;
    let reg = COV_TRACE_REG * wsum.max(1.0) / n as f64;

    let mut prob = Problem::new();
    let s0 = sigma_xi0 / s;
    let mut sig: Vec<AffMat> = Vec::with_capacity(n_steps + 1);
    if n_steps == 0 {
        let v = prob.symmetric(n);
        prob.psd(&v.add_const(&(-&s0)));
        sig.push(v);
    } else {
        sig.push(cst(&s0));
        for _ in 0..n_steps {
            // positive semidefiniteness follows from the recursion at ϑ̂
            sig.push(prob.symmetric(n));
        }
    }
    let mut lams = Vec::new();
    for t in 0..=n_steps {
        let next = if t < n_steps { sig[t + 1].clone() } else { sig[n_steps].clone() };
        let (lmi, lam) = robust_step_aff(&mut prob, a, bp, &bb, &ct, &sig[t], &next, unc);
        neg_def(&mut prob, &lmi, COV_MARGIN);
        lams.push(lam);
    }
    let first = if n_steps == 0 { 0 } else { 1 };
    let mut terms = Vec::new();
    for st in &sig[first..] {
        for (v, q) in hx.iter().zip(&q2) {
            terms.push((*q, quad_form(st, v)));
        }
        terms.push((reg, st.trace()));
    }
    let wnorm = terms.iter().map(|(w, _)| w.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    prob.minimize(lin_comb(terms.iter().map(|(w, e)| (*w / wnorm, e))));
    let sol = synth::solve(&prob, "error covariance").map_err(|e| match e {
        Error::Infeasible(_) => Error::Numerical("error covariance SDP infeasible although the controller is robustly stabilizing (internal inconsistency)".into()),
        e => e,
    })?;
    let vals: Vec<Mat> = sig.iter().map(|m| linalg::sym(&sol.matrix(m))).collect();
    let lvals: Vec<Option<Mat>> = lams.iter().map(|l| l.as_ref().map(|l| linalg::sym(&sol.matrix(l)))).collect();
    let mut worst = f64::NEG_INFINITY;
    for t in 0..=n_steps {
        let next = if t < n_steps { &vals[t + 1] } else { &vals[n_steps] };
        let m = robust_step(a, bp, &bb, &ct, &vals[t], next, unc, lvals[t].as_ref());
        worst = worst.max(linalg::max_eig(&m));
    }
    if worst > CERT_SLACK {
        return Err(Error::Numerical(format!("covariance certificate failed re-verification (max eig {worst:.3e})")));
    }
    let sigma_bar: Vec<Mat> = vals.iter().map(|m| m * s).collect();
    let stationary = sigma_bar[n_steps].clone();
    let lambdas = lvals.into_iter().flatten().map(|l| l * s).collect();
    Ok(CovarianceDesign { sigma_bar, stationary, lambdas, lmi_max_eig: worst })
}

/// Without parameter uncertainty the bounds are the exact recursion, closed by the stationary
/// covariance at `N`.
fn nominal_covariance(clfr: &ClosedLoopLfr, sigma_xi0: &Mat, n_steps: usize) -> Result<CovarianceDesign> {
    let a = &clfr.a_cal;
    let bb = &clfr.b_d * clfr.b_d.transpose();
    let stationary = linalg::dlyap(a, &bb).ok_or_else(|| Error::Numerical("nominal closed loop is not Schur stable".into()))?;
    let mut sigma_bar = vec![linalg::sym(sigma_xi0)];
    for _ in 1..n_steps {
        let last = sigma_bar.last().unwrap();
        sigma_bar.push(linalg::sym(&(a * last * a.transpose() + &bb)));
    }
    sigma_bar.push(stationary.clone());
    if n_steps == 0 {
        sigma_bar.truncate(1);
        sigma_bar[0] = stationary.clone();
    }
    Ok(CovarianceDesign { sigma_bar, stationary, lambdas: Vec::new(), lmi_max_eig: f64::NAN })
}

/// Stochastic tightenings `c_{j,t}` (one row per constraint, one column per covariance bound).
pub fn stochastic_tightening(sigma_bar: &[Mat], xi: &Mat, cons: &ConstraintSpec) -> Result<Vec<Vec<f64>>> {
    let hx = projected(cons, xi);
    let c: Vec<Vec<f64>> = hx
        .iter()
        .zip(&cons.p)
        .map(|(v, &p)| {
            let q = normal_quantile(p);
            sigma_bar.iter().map(|s| q * v.dot(&(s * v)).max(0.0).sqrt()).collect()
        })
        .collect();
    for (j, row) in c.iter().enumerate() {
        if row.iter().any(|&v| v >= 1.0) {
            return Err(Error::Infeasible(format!("constraint {j} unsatisfiable at level {}", cons.p[j])));
        }
    }
    Ok(c)
}

/// Nominal tightenings `f_j = ‖𝒫^{-1/2} Ξᵀ h_j‖`.
pub fn nominal_tightening(p: &Mat, xi: &Mat, cons: &ConstraintSpec) -> Result<Vec<f64>> {
    let xp = linalg::inv_spd(p).ok_or_else(|| Error::Numerical("tube shape is singular".into()))?;
    Ok(projected(cons, xi).iter().map(|v| v.dot(&(&xp * v)).max(0.0).sqrt()).collect())
}

/// Per-coefficient factors `F_c = 𝒫^{1/2} B_p J_c L` with `J_c` the rows of `J` for column `c`
/// of `Γ`; `Σ_c z_c F_c` is the image of the unit ball under the parameter error.
pub fn tube_factors(p: &Mat, b_p: &Mat, j: &Mat, sigma_half: &Mat, nw: usize) -> Vec<Mat> {
    let ph = linalg::psd_sqrt(p);
    let nz = j.nrows() / nw;
    (0..nz).map(|c| &ph * b_p * j.rows(c * nw, nw) * sigma_half).collect()
}

/// `Σ̄_J[c, c'] = tr(F_c F_{c'}ᵀ)`.
pub fn sigma_j_bar(factors: &[Mat]) -> Mat {
    let nz = factors.len();
    Mat::from_fn(nz, nz, |a, b| factors[a].dot(&factors[b]))
}

/// The lifted matrix `(I ⊗ 𝒫^{1/2}B_p) J Σ Jᵀ (I ⊗ 𝒫^{1/2}B_p)ᵀ`.
pub fn sigma_j_lifted(p: &Mat, b_p: &Mat, j: &Mat, sigma: &Mat, nw: usize) -> Mat {
    let nz = j.nrows() / nw;
    let g = linalg::eye(nz).kronecker(&(linalg::psd_sqrt(p) * b_p));
    linalg::sym(&(&g * j * sigma * j.transpose() * g.transpose()))
}

/// `Σ_i (I ⊗ e_i)ᵀ M (I ⊗ e_i)` over the basis of the inner factor of size `n`.
pub fn compress_lifted(m: &Mat, n: usize) -> Mat {
    let nz = m.nrows() / n;
    Mat::from_fn(nz, nz, |a, b| (0..n).map(|i| m[(a * n + i, b * n + i)]).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    pub c_lower: f64,
    pub sigma_bar: f64,
    #[serde(with = "serde_mat::mat")]
    pub s_xi_c: Mat,
}

impl Terminal {
    /// Slacks of the two terminal inequalities (non-negative inside the set).
    pub fn slacks(&self, p: &Mat, rho: f64, xi: &Vector, alpha: f64) -> (f64, f64) {
        let nrm = xi.dot(&(p * xi)).max(0.0).sqrt();
        (self.c_lower - nrm - alpha, (1.0 - rho) * self.c_lower / self.sigma_bar - nrm)
    }
}

pub fn stage_weight(ctrl: &Controller, perf: &PerformanceSpec) -> Mat {
    linalg::block_diag(&[&perf.q_c(), &(ctrl.k.transpose() * perf.r_c() * &ctrl.k)])
}

pub fn design_terminal(tube: &TubeDesign, c: &[Vec<f64>], f: &[f64], sigma_j_half: &Mat, clfr: &ClosedLoopLfr, q_xi: &Mat) -> Result<Terminal> {
    let mut c_lower = f64::INFINITY;
    for (row, &fj) in c.iter().zip(f) {
        if fj > 0.0 {
            for &cjt in row {
                c_lower = c_lower.min((1.0 - cjt) / fj);
            }
        }
    }
    if !(c_lower > 0.0) || !c_lower.is_finite() {
        return Err(Error::Infeasible("terminal set empty".into()));
    }
    let sigma_bar = linalg::sigma_max(&(sigma_j_half * &clfr.xi * linalg::psd_sqrt(&tube.x_p)));
    let s_xi_c = linalg::dlyap(&clfr.a_cal.transpose(), q_xi).ok_or_else(|| Error::Numerical("nominal closed loop is not Schur stable".into()))?;
    Ok(Terminal { c_lower, sigma_bar, s_xi_c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    /// Length `N` of the transient covariance bounds.
    pub n_cov: usize,
    /// Prediction horizon of the online problem.
    pub horizon: usize,
    pub grid_points: usize,
    /// Ignore the parameter uncertainty (certainty-equivalent stochastic MPC).
    pub nominal: bool,
}

impl Default for DesignConfig {
    fn default() -> Self {
        DesignConfig { n_cov: 20, horizon: 40, grid_points: 50, nominal: false }
    }
}

/// Everything the online controller needs, in one serializable artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcDesign {
    pub version: u32,
    pub nominal: bool,
    pub horizon: usize,
    pub n_cov: usize,
    pub rho: f64,
    #[serde(with = "serde_mat::mat")]
    pub p: Mat,
    #[serde(with = "serde_mat::mats")]
    pub sigma_bar: Vec<Mat>,
    #[serde(with = "serde_mat::mat")]
    pub sigma_stationary: Mat,
    /// `c[j][t]` for `t = 0..N`.
    pub c: Vec<Vec<f64>>,
    pub c_stationary: Vec<f64>,
    pub f: Vec<f64>,
    #[serde(with = "serde_mat::mat")]
    pub sigma_j_bar: Mat,
    /// Symmetric square root of `Σ̄_J` (second-order-cone tube).
    #[serde(with = "serde_mat::mat")]
    pub sigma_j_half: Mat,
    /// `F_c` factors (semidefinite tube).
    #[serde(with = "serde_mat::mats")]
    pub tube_factors: Vec<Mat>,
    pub terminal: Terminal,
    pub grid: Vec<GridPoint>,
    pub controller: Controller,
    #[serde(with = "serde_mat::mat")]
    pub a_cal: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b_nu: Mat,
    #[serde(with = "serde_mat::mat")]
    pub xi: Mat,
    #[serde(with = "serde_mat::mat")]
    pub q_xi: Mat,
    #[serde(with = "serde_mat::mat")]
    pub r_c: Mat,
    pub constraints: ConstraintSpec,
    /// Mean of the closed-loop initial state `(μ_x0, x_c0)`.
    #[serde(with = "serde_mat::vector")]
    pub mu_xi0: Vector,
}

impl MpcDesign {
    pub fn n(&self) -> usize {
        self.a_cal.nrows()
    }

    pub fn nu(&self) -> usize {
        self.b_nu.ncols()
    }

    /// `c_{j,t}`, with the stationary value beyond `N`.
    pub fn c_at(&self, j: usize, t: usize) -> f64 {
        self.c[j].get(t).copied().unwrap_or(self.c_stationary[j])
    }

    /// `Σ̄_{ξ,t}`, with the stationary bound beyond `N`.
    pub fn sigma_at(&self, t: usize) -> &Mat {
        self.sigma_bar.get(t).unwrap_or(&self.sigma_stationary)
    }

    /// `z = Ξ ξ̄ + [0; ν]`, the nominal `(x̄, ū)`.
    pub fn z_of(&self, xi_bar: &Vector, nu: &Vector) -> Vector {
        let mut z = &self.xi * xi_bar;
        let nx = self.xi.nrows() - self.nu();
        for k in 0..self.nu() {
            z[nx + k] += nu[k];
        }
        z
    }

    /// Tube increment in the semidefinite form: `σ_max(Σ_c z_c F_c)`.
    pub fn tube_increment_lmi(&self, z: &Vector) -> f64 {
        let mut g = Mat::zeros(self.tube_factors[0].nrows(), self.tube_factors[0].ncols());
        for (zc, f) in z.iter().zip(&self.tube_factors) {
            g += f * *zc;
        }
        linalg::sigma_max(&g)
    }

    /// Tube increment in the second-order-cone form: `‖Σ̄_J^{1/2} z‖`.
    pub fn tube_increment_soc(&self, z: &Vector) -> f64 {
        (&self.sigma_j_half * z).norm()
    }

    pub fn p_norm(&self, v: &Vector) -> f64 {
        v.dot(&(&self.p * v)).max(0.0).sqrt()
    }
}

/// Inputs of the offline design.
pub struct DesignInputs<'a> {
    pub model: &'a StructuredModel,
    pub ell: &'a UncertaintyEllipsoid,
    pub controller: &'a Controller,
    pub q: &'a Mat,
    pub r: &'a Mat,
    pub perf: &'a PerformanceSpec,
    pub constraints: &'a ConstraintSpec,
    pub x0_mean: &'a Vector,
    pub x0_cov: &'a Mat,
}

/// Closed loop, parameter-set factor and the matching multiplier channel.
pub fn design_parts(inp: &DesignInputs, nominal: bool) -> Result<(OpenLoopLfr, ClosedLoopLfr, Mat, UncertaintyChannel)> {
    let open = lfr::build_open_lfr(inp.model, inp.ell)?;
    let clfr = lfr::close_loop(&open, inp.controller, inp.q, inp.r, inp.perf)?;
    let nth = open.ntheta();
    let sigma_half = if nominal { Mat::zeros(nth, nth) } else { linalg::psd_sqrt(&inp.ell.sigma_theta_delta) };
    let unc = channel(&open, &sigma_half);
    Ok((open, clfr, sigma_half, unc))
}

pub fn design_mpc(inp: &DesignInputs, cfg: &DesignConfig) -> Result<MpcDesign> {
    let (open, clfr, sigma_half, unc) = design_parts(inp, cfg.nominal)?;
    let (nx, nu) = (open.nx(), open.nu());
    inp.constraints.validate(nx + nu)?;
    if inp.x0_mean.len() != nx || inp.x0_cov.shape() != (nx, nx) {
        return invalid("initial state distribution does not match the plant");
    }
    if cfg.horizon == 0 {
        return invalid("prediction horizon must be positive");
    }
    let rho_nom = linalg::spectral_radius(&clfr.a_cal);
    if rho_nom >= 1.0 {
        return invalid("nominal closed loop is not Schur stable");
    }
    let grid = rho_grid(rho_nom, cfg.grid_points);
    let tube = design_tube(&clfr, &unc, &inp.model.j, &sigma_half, inp.constraints, &grid)?;
    let sigma_xi0 = linalg::block_diag(&[inp.x0_cov, &Mat::zeros(nx, nx)]);
    let cov = design_error_covariance(&clfr, &unc, inp.constraints, &sigma_xi0, cfg.n_cov)?;
    let c = stochastic_tightening(&cov.sigma_bar, &clfr.xi, inp.constraints)?;
    let c_stationary: Vec<f64> = c.iter().map(|row| *row.last().unwrap()).collect();
    let f = nominal_tightening(&tube.p, &clfr.xi, inp.constraints)?;
    let factors = tube_factors(&tube.p, &clfr.b_p, &inp.model.j, &sigma_half, open.nw());
    let sj = sigma_j_bar(&factors);
    let sj_half = linalg::psd_sqrt(&sj);
    let q_xi = stage_weight(inp.controller, inp.perf);
    let terminal = design_terminal(&tube, &c, &f, &sj_half, &clfr, &q_xi)?;
    // the controller state starts at the mean of the plant state, deterministically
    let mu_xi0 = Vector::from_iterator(2 * nx, inp.x0_mean.iter().chain(inp.x0_mean.iter()).copied());
    Ok(MpcDesign {
        version: FORMAT_VERSION,
        nominal: cfg.nominal,
        horizon: cfg.horizon,
        n_cov: cfg.n_cov,
        rho: tube.rho,
        p: tube.p,
        sigma_bar: cov.sigma_bar,
        sigma_stationary: cov.stationary,
        c,
        c_stationary,
        f,
        sigma_j_bar: sj,
        sigma_j_half: sj_half,
        tube_factors: factors,
        terminal,
        grid: tube.grid,
        controller: inp.controller.clone(),
        a_cal: clfr.a_cal,
        b_nu: clfr.b_nu,
        xi: clfr.xi,
        q_xi,
        r_c: inp.perf.r_c(),
        constraints: inp.constraints.clone(),
        mu_xi0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::rng_for;
    use crate::testutil::{fixture, N_COV};

    /// Standard normal quantile by bisection on the CDF.
    fn quantile_by_bisection(p: f64) -> f64 {
        let cdf = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn scalar_spec(p: f64) -> ConstraintSpec {
        ConstraintSpec::new(vec![Vector::from_vec(vec![1.0])], vec![p]).unwrap()
    }

    #[test]
    fn constraint_spec_validation() {
        assert!(ConstraintSpec::new(vec![], vec![]).is_err());
        assert!(ConstraintSpec::new(vec![Vector::zeros(2)], vec![1.0]).is_err());
        assert!(ConstraintSpec::new(vec![Vector::zeros(2)], vec![0.9, 0.9]).is_err());
        let c = ConstraintSpec::chain(2, 0.3, 3.5, 0.95).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.validate(6).is_ok());
        assert!(c.validate(5).is_err());
        assert!((c.h[0][2] - 1.0 / 0.3).abs() < 1e-12 && (c.h[1][2] + 1.0 / 0.3).abs() < 1e-12);
        assert!((c.h[7][5] + 1.0 / 3.5).abs() < 1e-12);
    }

    #[test]
    fn scalar_tightening_matches_quantile() {
        let sig = vec![Mat::from_element(1, 1, 0.01)];
        let c = stochastic_tightening(&sig, &linalg::eye(1), &scalar_spec(0.95)).unwrap();
        let expect = quantile_by_bisection(0.95) * 0.1;
        assert!((c[0][0] - expect).abs() < 1e-9, "{} vs {expect}", c[0][0]);
        assert!((c[0][0] - 0.16449).abs() < 1e-5);
    }

    #[test]
    fn median_level_and_orthogonal_rows_are_untightened() {
        let sig = vec![Mat::from_element(1, 1, 0.3); 3];
        let c = stochastic_tightening(&sig, &linalg::eye(1), &scalar_spec(0.5)).unwrap();
        assert!(c[0].iter().all(|&v| v.abs() < 1e-12));
        // h only touches u while Ξ maps into x alone
        let xi = Mat::from_row_slice(2, 1, &[1.0, 0.0]);
        let cons = ConstraintSpec::new(vec![Vector::from_vec(vec![0.0, 1.0])], vec![0.95]).unwrap();
        let c = stochastic_tightening(&sig, &xi, &cons).unwrap();
        let f = nominal_tightening(&Mat::from_element(1, 1, 2.0), &xi, &cons).unwrap();
        assert!(c[0].iter().all(|&v| v == 0.0) && f[0] == 0.0);
    }

    #[test]
    fn unsatisfiable_level_is_reported() {
        let sig = vec![Mat::from_element(1, 1, 1.0)];
        assert!(matches!(stochastic_tightening(&sig, &linalg::eye(1), &scalar_spec(0.95)), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rho_grid_is_log_spaced() {
        let g = rho_grid(0.5, 50);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 0.51).abs() < 1e-12 && (g[49] - 0.999).abs() < 1e-12);
        let r: Vec<f64> = g.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(r.iter().all(|x| (x - r[0]).abs() < 1e-12));
    }

    #[test]
    fn sampled_contraction_certificate() {
        let f = fixture();
        let ph = linalg::psd_sqrt(&f.d.p);
        let pih = linalg::spd_inv_sqrt(&f.d.p);
        let mut rng = rng_for(21, 0);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..500 {
            let th = f.cs.id.ellipsoid.sample_boundary_biased(&mut rng);
            let a = f.clfr.a_of(&th);
            let m = &pih * a.transpose() * &f.d.p * &a * &pih;
            worst = worst.max(linalg::max_eig(&linalg::sym(&m)));
        }
        assert!(worst <= f.d.rho * f.d.rho + 1e-7, "{worst} > {}", f.d.rho * f.d.rho);
        assert!(linalg::min_eig(&ph) > 0.0);
    }

    #[test]
    fn covariance_bounds_dominate_sampled_recursions() {
        let f = fixture();
        let d = &f.d;
        let bb = &f.clfr.b_d * f.clfr.b_d.transpose();
        let mut rng = rng_for(22, 0);
        let mut worst = f64::NEG_INFINITY;
        for _ in 0..100 {
            let th = f.cs.id.ellipsoid.sample_boundary_biased(&mut rng);
            let a = f.clfr.a_of(&th);
            let mut s = d.sigma_bar[0].clone();
            for t in 1..=3 * N_COV {
                s = &a * &s * a.transpose() + &bb;
                let gap = linalg::max_eig(&linalg::sym(&(&s - d.sigma_at(t))));
                worst = worst.max(gap);
            }
        }
        assert!(worst <= 1e-7, "sampled covariance exceeds the bound by {worst:.3e}");
    }

    #[test]
    fn vanishing_uncertainty_recovers_the_recursion() {
        let f = fixture();
        let open_ell = f.cs.id.ellipsoid.clone();
        let open = lfr::build_open_lfr(&f.cs.id.model, &open_ell).unwrap();
        let tiny = &f.sigma_half * 1e-4;
        let unc = channel(&open, &tiny);
        let s0 = f.d.sigma_bar[0].clone();
        let cov = design_error_covariance(&f.clfr, &unc, &f.d.constraints, &s0, 6).unwrap();
        let (a, bb) = (&f.clfr.a_cal, &f.clfr.b_d * f.clfr.b_d.transpose());
        let mut s = s0.clone();
        for t in 1..6 {
            s = a * &s * a.transpose() + &bb;
            let rel = (cov.sigma_bar[t].trace() - s.trace()).abs() / s.trace();
            assert!(rel < 0.05, "t = {t}: relative trace gap {rel}");
        }
        let stat = linalg::dlyap(a, &bb).unwrap();
        assert!((cov.stationary.trace() - stat.trace()).abs() / stat.trace() < 0.05);
    }

    #[test]
    fn zero_horizon_gives_a_robust_stationary_bound() {
        let f = fixture();
        let open = lfr::build_open_lfr(&f.cs.id.model, &f.cs.id.ellipsoid).unwrap();
        let unc = channel(&open, &f.sigma_half);
        let cov = design_error_covariance(&f.clfr, &unc, &f.d.constraints, &f.d.sigma_bar[0], 0).unwrap();
        assert_eq!(cov.sigma_bar.len(), 1);
        let bb = &f.clfr.b_d * f.clfr.b_d.transpose();
        let nominal = linalg::dlyap(&f.clfr.a_cal, &bb).unwrap();
        assert!(linalg::min_eig(&(&cov.stationary - &nominal)) > -1e-9);
        let mut rng = rng_for(23, 0);
        for _ in 0..50 {
            let a = f.clfr.a_of(&f.cs.id.ellipsoid.sample_boundary(&mut rng));
            let ex = linalg::dlyap(&a, &bb).unwrap();
            assert!(linalg::max_eig(&linalg::sym(&(&ex - &cov.stationary))) < 1e-7);
        }
    }

    #[test]
    fn tightening_grows_towards_stationary() {
        let d = &fixture().d;
        for (j, row) in d.c.iter().enumerate() {
            for w in row.windows(2) {
                assert!(w[1] >= w[0] - 1e-6, "constraint {j}: {row:?}");
            }
            assert!(row.iter().all(|&c| (0.0..1.0).contains(&c)));
        }
        assert!(d.f.iter().all(|&f| f > 0.0));
    }

    #[test]
    fn tube_factors_match_lifted_matrix() {
        let f = fixture();
        let sig = linalg::sym(&(&f.sigma_half * &f.sigma_half));
        let lifted = sigma_j_lifted(&f.d.p, &f.clfr.b_p, &f.cs.id.model.j, &sig, f.nw);
        let compressed = compress_lifted(&lifted, f.d.n());
        let gap = (&compressed - &f.d.sigma_j_bar).amax();
        assert!(gap <= 1e-12 * f.d.sigma_j_bar.amax().max(1.0), "gap {gap:e}");
    }

    #[test]
    fn tube_grid_feasibility_is_monotone() {
        let g = &fixture().d.grid;
        let first = g.iter().position(|p| p.objective.is_some()).expect("some rate feasible");
        assert!(g[first..].iter().all(|p| p.objective.is_some()), "{g:?}");
        let best = g.iter().filter_map(|p| p.objective).fold(f64::INFINITY, f64::min);
        let at = g.iter().find(|p| p.rho == fixture().d.rho).unwrap();
        assert_eq!(at.objective, Some(best));
    }

    #[test]
    fn epigraph_values_bound_nominal_tightening() {
        let f = fixture();
        let open = lfr::build_open_lfr(&f.cs.id.model, &f.cs.id.ellipsoid).unwrap();
        let unc = channel(&open, &f.sigma_half);
        let grid = [f.d.rho];
        let tube = design_tube(&f.clfr, &unc, &f.cs.id.model.j, &f.sigma_half, &f.d.constraints, &grid).unwrap();
        let fj = nominal_tightening(&tube.p, &f.clfr.xi, &f.d.constraints).unwrap();
        for (g, fv) in tube.gamma.iter().zip(&fj) {
            assert!(*g >= fv * fv - 1e-6 * g.max(1.0));
        }
        assert!(tube.lmi_max_eig <= CERT_SLACK);
    }

    #[test]
    fn nominal_tube_certifies_nominal_contraction() {
        let f = fixture();
        let open = lfr::build_open_lfr(&f.cs.id.model, &f.cs.id.ellipsoid).unwrap();
        let zero = Mat::zeros(open.ntheta(), open.ntheta());
        let unc = channel(&open, &zero);
        let rho_nom = linalg::spectral_radius(&f.clfr.a_cal);
        let grid = rho_grid(rho_nom, 6);
        let tube = design_tube(&f.clfr, &unc, &f.cs.id.model.j, &zero, &f.d.constraints, &grid).unwrap();
        assert!(tube.grid.iter().all(|g| g.objective.is_some()));
        let a = &f.clfr.a_cal;
        let m = a.transpose() * &tube.p * a - &tube.p * (tube.rho * tube.rho);
        assert!(linalg::max_eig(&linalg::sym(&m)) <= 1e-8 * linalg::max_eig(&tube.p));
    }

    #[test]
    fn terminal_weight_solves_lyapunov_equation() {
        let d = &fixture().d;
        let s = &d.terminal.s_xi_c;
        let res = d.a_cal.transpose() * s * &d.a_cal - s + &d.q_xi;
        assert!(res.amax() <= 1e-9 * s.amax().max(1.0), "residual {:e}", res.amax());
        let mut rng = rng_for(24, 0);
        for _ in 0..200 {
            let x = crate::sim::gaussian_vec(&mut rng, d.n());
            let ax = &d.a_cal * &x;
            let dec = ax.dot(&(s * &ax)) - x.dot(&(s * &x)) + x.dot(&(&d.q_xi * &x));
            assert!(dec <= 1e-9 * x.dot(&(s * &x)).max(1.0));
        }
    }

    #[test]
    fn terminal_set_is_invariant_and_admissible() {
        let d = &fixture().d;
        let t = &d.terminal;
        let radius = t.c_lower.min((1.0 - d.rho) * t.c_lower / t.sigma_bar);
        let pih = linalg::spd_inv_sqrt(&d.p);
        let mut rng = rng_for(25, 0);
        for _ in 0..1000 {
            let g = crate::sim::gaussian_vec(&mut rng, d.n());
            let r = radius * rand::Rng::gen::<f64>(&mut rng);
            let xi = &pih * (&g * (r / g.norm()));
            let alpha = (t.c_lower - d.p_norm(&xi)).max(0.0) * rand::Rng::gen::<f64>(&mut rng);
            let (s1, s2) = t.slacks(&d.p, d.rho, &xi, alpha);
            assert!(s1 >= -1e-12 && s2 >= -1e-12);
            let nu0 = Vector::zeros(d.nu());
            let z = d.z_of(&xi, &nu0);
            for (j, h) in d.constraints.h.iter().enumerate() {
                for tt in 0..=d.n_cov + 1 {
                    assert!(h.dot(&z) + d.f[j] * alpha <= 1.0 - d.c_at(j, tt) + 1e-9);
                }
            }
            let next = &d.a_cal * &xi;
            let a_next = d.rho * alpha + d.tube_increment_soc(&z);
            let (n1, n2) = t.slacks(&d.p, d.rho, &next, a_next);
            assert!(n1 >= -1e-9 && n2 >= -1e-9, "{n1} {n2}");
        }
    }

    #[test]
    fn design_round_trips_through_json() {
        let d = &fixture().d;
        let back: MpcDesign = serde_json::from_str(&serde_json::to_string(d).unwrap()).unwrap();
        assert_eq!(back.version, FORMAT_VERSION);
        assert!((&back.p - &d.p).amax() <= 1e-12 * d.p.amax());
        assert_eq!(back.c, d.c);
    }
}
