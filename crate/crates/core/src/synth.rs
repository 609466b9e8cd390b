//! Robust H2 output-feedback synthesis by D-K iteration.
//!
//! The analysis step fixes the controller and searches a Lyapunov certificate `𝒳` together with
//! the multiplier `Λ`; the synthesis step fixes `Λ` and searches the controller through the
//! usual linearizing change of variables.

use conic::{AffMat, Problem, Settings, Status};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lfr::{self, ClosedLoopLfr, Controller, OpenLoopLfr, OverapproxSet, PerformanceSpec};
use crate::linalg::{self, Mat};
use crate::model::{StructuredModel, FORMAT_VERSION};
use crate::serde_mat;
use crate::uq::UncertaintyEllipsoid;

/// Absolute eigenvalue slack on re-verified certificates (in normalized units).
pub const CERT_SLACK: f64 = 1e-8;
/// Margin turning strict LMIs into non-strict ones (normalized units).
pub(crate) const MARGIN: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierMode {
    /// One multiplier `Λ ≻ 0` per disturbance channel pair (`Λ ∈ S^{nw}`).
    FullBlock,
    /// Scalar multiplier on the norm-bounded outer set.
    Overapprox,
}

/// Scaled uncertainty channel: `q̃ = left · Ξ ξ` enters `p = Δ̃ q̃` with multiplier block `Π(Λ)`.
#[derive(Clone, Debug)]
pub struct UncertaintyChannel {
    pub mode: MultiplierMode,
    pub left: Mat,
    pub nw: usize,
    pub ntheta: usize,
    pub overapprox: Option<OverapproxSet>,
}

impl UncertaintyChannel {
    pub fn rows(&self) -> usize {
        self.left.nrows()
    }

    /// `Π = Λ ⊗ I_nϑ` or `λ I_nz`.
    pub(crate) fn pi(&self, lam: &AffMat) -> AffMat {
        match self.mode {
            MultiplierMode::FullBlock => lam.kron_identity(self.ntheta),
            MultiplierMode::Overapprox => AffMat::scaled_identity(self.rows(), lam.get(0, 0)),
        }
    }

    pub(crate) fn multiplier(&self, prob: &mut Problem) -> AffMat {
        match self.mode {
            MultiplierMode::FullBlock => prob.symmetric(self.nw),
            MultiplierMode::Overapprox => AffMat::scaled_identity(self.nw, &prob.scalar()),
        }
    }

    pub(crate) fn pi_const(&self, lam: &Mat) -> Mat {
        match self.mode {
            MultiplierMode::FullBlock => lam.kronecker(&linalg::eye(self.ntheta)),
            MultiplierMode::Overapprox => linalg::eye(self.rows()) * lam[(0, 0)],
        }
    }
}

pub fn uncertainty_channel(model: &StructuredModel, open: &OpenLoopLfr, ell: &UncertaintyEllipsoid, mode: MultiplierMode) -> Result<UncertaintyChannel> {
    let (nw, nth) = (open.nw(), open.ntheta());
    match mode {
        MultiplierMode::FullBlock => {
            let half = linalg::psd_sqrt(&ell.sigma_theta_delta);
            let left = linalg::eye(nw).kronecker(&half) * &open.j_delta;
            Ok(UncertaintyChannel { mode, left, nw, ntheta: nth, overapprox: None })
        }
        MultiplierMode::Overapprox => {
            let set = lfr::optimize_overapprox_d(ell, &model.j, nw)?;
            let left = linalg::spd_inv_sqrt(&(&set.d / set.bound));
            Ok(UncertaintyChannel { mode, left, nw, ntheta: nth, overapprox: Some(set) })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustController {
    pub version: u32,
    pub controller: Controller,
    /// Certified bound on the worst-case H2 norm over the ellipsoid.
    pub gamma: f64,
    /// H2 norm of the nominal closed loop.
    pub nominal_gamma: f64,
    #[serde(with = "serde_mat::mat")]
    pub lambda: Mat,
    #[serde(with = "serde_mat::mat")]
    pub x_cal: Mat,
    /// Robust H2 bound of each accepted D-K iterate, starting from the nominal LQG controller.
    pub gamma_trace: Vec<f64>,
    pub mode: MultiplierMode,
    pub delta: f64,
}

/// Observer-based LQG controller for the nominal model.
pub fn nominal_lqg(open: &OpenLoopLfr, q: &Mat, r: &Mat, perf: &PerformanceSpec) -> Result<Controller> {
    perf.validate(open.nx(), open.nu())?;
    let (a, b, c) = (&open.a_hat, &open.b_hat, &open.c);
    let riccati = || Error::Numerical("Riccati iteration did not converge".into());
    let xk = linalg::dare(a, b, &perf.q_c(), &perf.r_c()).ok_or_else(riccati)?;
    let k = linalg::lqr_gain(a, b, &xk, &perf.r_c()).ok_or_else(riccati)?;
    let w = &open.e * q * open.e.transpose();
    let p = linalg::dare(&a.transpose(), &c.transpose(), &w, r).ok_or_else(riccati)?;
    let s = linalg::sym(&(c * &p * c.transpose() + r));
    let l = (s.cholesky().ok_or_else(riccati)?.solve(&(c * &p * a.transpose()))).transpose();
    let a_c = a + b * &k - &l * c;
    Ok(Controller { a_c, k, l })
}

fn cst(m: &Mat) -> AffMat {
    AffMat::from_const(m)
}

fn noise_scale(clfr_bd: &Mat) -> f64 {
    linalg::max_eig(&(clfr_bd * clfr_bd.transpose())).max(f64::MIN_POSITIVE)
}

pub(crate) fn solve(prob: &Problem, what: &str) -> Result<conic::Solution> {
    let settings = Settings { max_iter: 400, ..Settings::default() };
    let sol = prob.solve_retrying(&settings);
    match sol.status {
        Status::Optimal => Ok(sol),
        Status::Infeasible | Status::Unbounded => Err(Error::Infeasible(format!("{what} SDP is infeasible"))),
        Status::NumericalFailure => Err(Error::Solver(format!("{what} SDP failed ({})", sol.detail))),
    }
}

#[derive(Clone, Debug)]
pub struct DStep {
    pub lambda: Mat,
    pub x_cal: Mat,
    pub gamma: f64,
    /// Largest eigenvalue of the robust stability LMI at the solution (normalized units).
    pub lmi_max_eig: f64,
}

/// Robust analysis of a fixed closed loop: `min tr(C_ε 𝒳 C_εᵀ)` over `(Λ, 𝒳)`.
pub fn d_step(clfr: &ClosedLoopLfr, unc: &UncertaintyChannel) -> Result<DStep> {
    let n = clfr.n();
    let s = noise_scale(&clfr.b_d);
    let bd = &clfr.b_d / s.sqrt();
    let ct = &unc.left * &clfr.xi;
    let (a, bp) = (&clfr.a_cal, &clfr.b_p);

    let mut prob = Problem::new();
    let x = prob.symmetric(n);
    let lam = unc.multiplier(&mut prob);
    let blk11 = x.congruence(a).sub(&x).add_const(&(&bd * bd.transpose())).add(&lam.congruence(bp));
    let blk12 = x.left_mul(a).right_mul(&ct.transpose());
    let blk22 = x.congruence(&ct).sub(&unc.pi(&lam));
    let lmi = AffMat::block(&[vec![blk11, blk12.clone()], vec![blk12.transpose(), blk22]]).symmetrize();
    let m = lmi.nrows();
    prob.psd(&lmi.scale(-1.0).add_const(&(-linalg::eye(m) * MARGIN)));
    prob.psd(&x.add_const(&(-linalg::eye(n) * MARGIN)));
    let nl = lam.nrows();
    prob.psd(&lam.add_const(&(-linalg::eye(nl) * MARGIN)));
    prob.minimize(x.congruence(&clfr.c_eps).trace());
    let sol = solve(&prob, "robust analysis").map_err(|e| match e {
        Error::Infeasible(_) => Error::Infeasible("controller is not robustly stabilizing for this uncertainty set".into()),
        e => e,
    })?;

    let xv = linalg::sym(&sol.matrix(&x));
    let lv = linalg::sym(&sol.matrix(&lam));
    let check = robust_lmi(a, bp, &bd, &ct, &xv, &unc.pi_const(&lv), &lv);
    let lmi_max_eig = linalg::max_eig(&check);
    if lmi_max_eig > CERT_SLACK || linalg::min_eig(&xv) <= 0.0 || linalg::min_eig(&lv) <= 0.0 {
        return Err(Error::Numerical(format!("analysis certificate failed re-verification (max eig {lmi_max_eig:.3e})")));
    }
    let gamma = ((&clfr.c_eps * &xv * clfr.c_eps.transpose()).trace() * s).sqrt();
    Ok(DStep { lambda: lv * s, x_cal: xv * s, gamma, lmi_max_eig })
}

fn robust_lmi(a: &Mat, bp: &Mat, bd: &Mat, ct: &Mat, x: &Mat, pi: &Mat, lam: &Mat) -> Mat {
    let b11 = a * x * a.transpose() - x + bd * bd.transpose() + bp * lam * bp.transpose();
    let b12 = a * x * ct.transpose();
    let b22 = ct * x * ct.transpose() - pi;
    linalg::sym(&linalg::vstack(&[&linalg::hstack(&[&b11, &b12]), &linalg::hstack(&[&b12.transpose(), &b22])]))
}

/// Solution of the synthesis step in transformed variables (normalized units).
#[derive(Clone, Debug)]
pub struct KStep {
    pub x: Mat,
    pub y: Mat,
    pub m: Mat,
    pub f: Mat,
    pub s: Mat,
    pub w: Mat,
    /// `tr W` rescaled to physical units, an upper bound on `γ²` for fixed `Λ`.
    pub objective: f64,
    pub scale: f64,
}

/// Controller synthesis for a fixed multiplier `Λ`.
pub fn k_step(open: &OpenLoopLfr, unc: &UncertaintyChannel, lambda: &Mat, q: &Mat, r: &Mat, perf: &PerformanceSpec) -> Result<KStep> {
    let (nx, nu, nw, ny) = (open.nx(), open.nu(), open.nw(), open.ny());
    if lambda.shape() != (nw, nw) || linalg::min_eig(lambda) <= 0.0 {
        return invalid("multiplier must be a positive definite nw x nw matrix");
    }
    let (a, b, c, e) = (&open.a_hat, &open.b_hat, &open.c, &open.e);
    let qh = linalg::psd_sqrt(q);
    let rh = linalg::psd_sqrt(r);
    let bd_full = linalg::block_diag(&[&(e * &qh), &rh]);
    let s = noise_scale(&bd_full);
    let (eq, rh) = (e * &qh / s.sqrt(), rh / s.sqrt());
    let lam = lambda / s;
    let ne = perf.c_eps.nrows();

    let mut prob = Problem::new();
    let x = prob.symmetric(nx);
    let y = prob.symmetric(nx);
    let m = prob.matrix(nu, nx);
    let f = prob.matrix(nx, ny);
    let sv = prob.matrix(nx, nx);
    let w = prob.symmetric(ne);
    let id = AffMat::identity(nx);
    let z = AffMat::zeros;

    let txt = AffMat::block(&[vec![x.clone(), id.clone()], vec![id.clone(), y.clone()]]);
    let tat = AffMat::block(&[
        vec![x.left_mul(a).add(&m.left_mul(b)), cst(a)],
        vec![sv.clone(), y.right_mul(a).add(&f.right_mul(c))],
    ]);
    let tbd = AffMat::block(&[vec![cst(&eq), z(nx, ny)], vec![y.right_mul(&eq), f.right_mul(&rh)]]);
    let el = e * &lam;
    let tbp = AffMat::block(&[vec![cst(&el)], vec![y.right_mul(&el)]]);
    let xi_xt = AffMat::block(&[vec![x.clone(), id.clone()], vec![m.clone(), z(nu, nx)]]);
    let cq = xi_xt.left_mul(&unc.left);
    let nq = unc.rows();
    let pi = unc.pi(&cst(&lam));
    let nd = nw + ny;
    let n2 = 2 * nx;

    let neg = |m: &AffMat| m.scale(-1.0);
    let big = AffMat::block(&[
        vec![neg(&txt), z(n2, nq), tat.clone(), tbd.clone(), tbp.clone()],
        vec![z(nq, n2), neg(&pi), cq.clone(), z(nq, nd), z(nq, nw)],
        vec![tat.transpose(), cq.transpose(), neg(&txt), z(n2, nd), z(n2, nw)],
        vec![tbd.transpose(), z(nd, nq), z(nd, n2), cst(&-linalg::eye(nd)), z(nd, nw)],
        vec![tbp.transpose(), z(nw, nq), z(nw, n2), z(nw, nd), cst(&-lam.clone())],
    ])
    .symmetrize();
    let nb = big.nrows();
    prob.psd(&big.scale(-1.0).add_const(&(-linalg::eye(nb) * MARGIN)));

    let cxt = AffMat::block(&[vec![x.left_mul(&perf.c_eps).add(&m.left_mul(&perf.d_eps)), cst(&perf.c_eps)]]);
    let perf_lmi = AffMat::block(&[vec![w.clone(), cxt.clone()], vec![cxt.transpose(), txt.clone()]]).symmetrize();
    prob.psd(&perf_lmi);
    prob.minimize(w.trace());
    let sol = solve(&prob, "controller synthesis")?;
    let ks = KStep {
        x: linalg::sym(&sol.matrix(&x)),
        y: linalg::sym(&sol.matrix(&y)),
        m: sol.matrix(&m),
        f: sol.matrix(&f),
        s: sol.matrix(&sv),
        w: linalg::sym(&sol.matrix(&w)),
        objective: sol.value(&w.trace()) * s,
        scale: s,
    };
    let big_v = linalg::sym(&sol.matrix(&big));
    let pv = linalg::sym(&sol.matrix(&perf_lmi));
    if linalg::max_eig(&big_v) > CERT_SLACK || linalg::min_eig(&pv) < -CERT_SLACK {
        return Err(Error::Numerical("synthesis LMIs failed re-verification".into()));
    }
    Ok(ks)
}

/// Controller from the transformed variables with `V = I`.
pub fn recover_controller(ks: &KStep, open: &OpenLoopLfr) -> Result<Controller> {
    recover_controller_with(ks, open, &linalg::eye(open.nx()))
}

/// Controller from the transformed variables for an arbitrary full-rank `V`.
pub fn recover_controller_with(ks: &KStep, open: &OpenLoopLfr, v: &Mat) -> Result<Controller> {
    let nx = open.nx();
    let vinv = v.clone().try_inverse().ok_or_else(|| Error::Numerical("V is singular".into()))?;
    let u = &vinv - &vinv * &ks.y * &ks.x;
    let sv = u.singular_values();
    if sv.min() <= 1e-10 * sv.max().max(1.0) {
        return Err(Error::Numerical("I - YX is numerically singular".into()));
    }
    let uinv = u.clone().try_inverse().ok_or_else(|| Error::Numerical("I - YX is singular".into()))?;
    let (a, b, c) = (&open.a_hat, &open.b_hat, &open.c);
    let k = &ks.m * &uinv;
    let l = &vinv * &ks.f;
    let a_c = &vinv * (&ks.s - &ks.y * a * &ks.x - &ks.f * c * &ks.x - &ks.y * b * &ks.m) * &uinv;
    debug_assert_eq!(a_c.shape(), (nx, nx));
    Ok(Controller { a_c, k, l })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub mode: MultiplierMode,
    pub tol_dk: f64,
    pub max_iters: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { mode: MultiplierMode::FullBlock, tol_dk: 1e-3, max_iters: 30 }
    }
}

pub struct SynthProblem<'a> {
    pub model: &'a StructuredModel,
    pub ell: &'a UncertaintyEllipsoid,
    pub q: &'a Mat,
    pub r: &'a Mat,
    pub perf: &'a PerformanceSpec,
}

/// D-K iteration from the nominal LQG controller.
pub fn dk_iterate(p: &SynthProblem, cfg: &SynthConfig) -> Result<RobustController> {
    let open = lfr::build_open_lfr(p.model, p.ell)?;
    let unc = uncertainty_channel(p.model, &open, p.ell, cfg.mode)?;
    let lqg = nominal_lqg(&open, p.q, p.r, p.perf)?;
    let close = |c: &Controller| lfr::close_loop(&open, c, p.q, p.r, p.perf);
    let cl0 = close(&lqg)?;
    let nominal_gamma = lfr::h2_norm(&cl0.a_cal, &cl0.b_d, &cl0.c_eps).ok_or_else(|| Error::Numerical("nominal LQG loop is not stable".into()))?;
    let mut best_d = d_step(&cl0, &unc).map_err(|e| match e {
        Error::Infeasible(_) => Error::Infeasible(
            "the nominal LQG controller is not robustly stabilizing for this ellipsoid; use more data or a smaller delta".into(),
        ),
        e => e,
    })?;
    let mut best = lqg;
    let mut trace = vec![best_d.gamma];
    for _ in 0..cfg.max_iters {
        let ks = match k_step(&open, &unc, &best_d.lambda, p.q, p.r, p.perf) {
            Ok(k) => k,
            Err(_) => break,
        };
        let cand = match recover_controller(&ks, &open) {
            Ok(c) => c,
            Err(_) => break,
        };
        let d = match close(&cand).and_then(|cl| d_step(&cl, &unc)) {
            Ok(d) => d,
            Err(_) => break,
        };
        let prev = best_d.gamma;
        // a worse candidate ends the iteration and is not an iterate
        if d.gamma > prev {
            break;
        }
        trace.push(d.gamma);
        best = cand;
        best_d = d;
        if (prev - best_d.gamma) / prev < cfg.tol_dk {
            break;
        }
    }
    // ship a certificate that was computed for exactly this controller
    let fin = d_step(&close(&best)?, &unc)?;
    Ok(RobustController {
        version: FORMAT_VERSION,
        controller: best,
        gamma: fin.gamma,
        nominal_gamma,
        lambda: fin.lambda,
        x_cal: fin.x_cal,
        gamma_trace: trace,
        mode: cfg.mode,
        delta: p.ell.delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{self, rng_for};
    use crate::uq::UncertaintyEllipsoid;
    use rand::Rng;

    struct Case {
        model: StructuredModel,
        ell: UncertaintyEllipsoid,
        q: Mat,
        r: Mat,
        perf: PerformanceSpec,
    }

    fn chain_case(scale: f64, delta: f64) -> Case {
        let truth = sim::build_msd_chain(2, 11);
        let n = truth.model.ntheta();
        let mut rng = rng_for(11, 2);
        let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let sig = (&g * g.transpose() + linalg::eye(n)) * scale;
        let ell = UncertaintyEllipsoid::from_covariance(truth.params.theta.clone(), sig, delta).unwrap();
        let (q, r) = truth.model.assemble_covariances(&truth.params).unwrap();
        let perf = PerformanceSpec::output_and_input(&truth.model.c, 2, 1e-2);
        Case { model: truth.model, ell, q, r, perf }
    }

    fn parts(c: &Case, mode: MultiplierMode) -> (OpenLoopLfr, UncertaintyChannel, Controller) {
        let open = lfr::build_open_lfr(&c.model, &c.ell).unwrap();
        let unc = uncertainty_channel(&c.model, &open, &c.ell, mode).unwrap();
        let lqg = nominal_lqg(&open, &c.q, &c.r, &c.perf).unwrap();
        (open, unc, lqg)
    }

    #[test]
    fn scalar_lqg_matches_riccati_fixed_point() {
        let m = scalar_system();
        let ell = UncertaintyEllipsoid::from_covariance(v1(0.5), Mat::from_element(1, 1, 1e-4), 0.9).unwrap();
        let open = lfr::build_open_lfr(&m, &ell).unwrap();
        let one = Mat::from_element(1, 1, 1.0);
        let perf = PerformanceSpec { c_eps: Mat::from_row_slice(2, 1, &[1.0, 0.0]), d_eps: Mat::from_row_slice(2, 1, &[0.0, 1.0]) };
        let c = nominal_lqg(&open, &one, &one, &perf).unwrap();
        // x = a²x - a²x²/(1+x) + 1 for both the control and the filter Riccati maps
        let (a, mut x) = (0.5, 1.0);
        for _ in 0..500 {
            x = a * a * x - a * a * x * x / (1.0 + x) + 1.0;
        }
        let k = -a * x / (1.0 + x);
        let l = a * x / (x + 1.0);
        assert!((c.k[(0, 0)] - k).abs() < 1e-10);
        assert!((c.l[(0, 0)] - l).abs() < 1e-10);
        assert!((c.a_c[(0, 0)] - (a + k - l)).abs() < 1e-10);
    }

    fn v1(v: f64) -> crate::linalg::Vector {
        crate::linalg::Vector::from_element(1, v)
    }

    /// `x+ = θ x + u + w`, `y = x + v`.
    fn scalar_system() -> StructuredModel {
        let mut m = StructuredModel::unstructured(Mat::from_element(1, 1, 1.0), 1);
        m.b0 = Mat::from_element(1, 1, 1.0);
        m.j = Mat::from_column_slice(2, 1, &[1.0, 0.0]);
        m
    }

    #[test]
    fn lqg_stabilizes_random_systems() {
        let mut rng = rng_for(5, 0);
        for _ in 0..50 {
            let nx = rng.gen_range(1..4);
            let nu = rng.gen_range(1..3);
            let ny = rng.gen_range(1..3);
            let mut a = Mat::from_fn(nx, nx, |_, _| rng.gen_range(-1.0..1.0));
            a *= 1.3 / linalg::spectral_radius(&a).max(0.1);
            let b = Mat::from_fn(nx, nu, |_, _| rng.gen_range(-1.0..1.0));
            let c = Mat::from_fn(ny, nx, |_, _| rng.gen_range(-1.0..1.0));
            let open = OpenLoopLfr {
                a_hat: a,
                b_hat: b,
                j_delta: Mat::zeros(nx, nx + nu),
                e: linalg::eye(nx),
                c: c.clone(),
                theta_hat: crate::linalg::Vector::zeros(1),
            };
            let perf = PerformanceSpec::output_and_input(&c, nu, 0.1);
            let q = linalg::eye(nx) * 0.1;
            let r = linalg::eye(ny) * 0.1;
            let Ok(ctrl) = nominal_lqg(&open, &q, &r, &perf) else { continue };
            let cl = lfr::close_loop(&open, &ctrl, &q, &r, &perf).unwrap();
            assert!(linalg::spectral_radius(&cl.a_cal) < 1.0);
        }
    }

    #[test]
    fn vanishing_uncertainty_recovers_nominal_h2() {
        let c = chain_case(1e-12, 0.9);
        let (open, unc, lqg) = parts(&c, MultiplierMode::FullBlock);
        let cl = lfr::close_loop(&open, &lqg, &c.q, &c.r, &c.perf).unwrap();
        let h2 = lfr::h2_norm(&cl.a_cal, &cl.b_d, &cl.c_eps).unwrap();
        let d = d_step(&cl, &unc).unwrap();
        assert!((d.gamma / h2 - 1.0).abs() < 1e-3, "{} vs {h2}", d.gamma);
        assert!(d.gamma >= h2 * (1.0 - 1e-9));

        let ks = k_step(&open, &unc, &d.lambda, &c.q, &c.r, &c.perf).unwrap();
        let rec = recover_controller(&ks, &open).unwrap();
        let cl2 = lfr::close_loop(&open, &rec, &c.q, &c.r, &c.perf).unwrap();
        let h2_rec = lfr::h2_norm(&cl2.a_cal, &cl2.b_d, &cl2.c_eps).unwrap();
        assert!((h2_rec / h2 - 1.0).abs() < 1e-2, "{h2_rec} vs {h2}");
    }

    #[test]
    fn gamma_grows_with_confidence_level() {
        let base = chain_case(2e-4, 0.8);
        let mut last = 0.0;
        for delta in [0.8, 0.9, 0.99] {
            let c = Case { ell: base.ell.with_delta(delta).unwrap(), ..chain_case(2e-4, delta) };
            let (open, unc, lqg) = parts(&c, MultiplierMode::FullBlock);
            let cl = lfr::close_loop(&open, &lqg, &c.q, &c.r, &c.perf).unwrap();
            let g = d_step(&cl, &unc).unwrap().gamma;
            assert!(g > last, "delta {delta}: {g} <= {last}");
            last = g;
        }
    }

    #[test]
    fn destabilized_loop_is_infeasible() {
        // open-loop unstable scalar plant with a deliberately weak controller
        let m = scalar_system();
        let ell = UncertaintyEllipsoid::from_covariance(v1(1.2), Mat::from_element(1, 1, 0.01), 0.9).unwrap();
        let open = lfr::build_open_lfr(&m, &ell).unwrap();
        let one = Mat::from_element(1, 1, 1.0);
        let perf = PerformanceSpec { c_eps: Mat::from_row_slice(2, 1, &[1.0, 0.0]), d_eps: Mat::from_row_slice(2, 1, &[0.0, 1.0]) };
        let lqg = nominal_lqg(&open, &one, &one, &perf).unwrap();
        let weak = Controller { k: &lqg.k * 0.3, a_c: &open.a_hat + &open.b_hat * (&lqg.k * 0.3) - &lqg.l * &open.c, l: lqg.l };
        let cl = lfr::close_loop(&open, &weak, &one, &one, &perf).unwrap();
        let edge = v1(1.2 + ell.sigma_theta_delta[(0, 0)].sqrt());
        assert!(linalg::spectral_radius(&cl.a_of(&edge)) >= 1.0);
        let unc = uncertainty_channel(&m, &open, &ell, MultiplierMode::FullBlock).unwrap();
        assert!(matches!(d_step(&cl, &unc), Err(Error::Infeasible(_))));
    }

    /// `𝒳` in normalized units from the transformed variables with `V = I`.
    fn lyapunov_from(ks: &KStep) -> Mat {
        let n = ks.x.nrows();
        let id = linalg::eye(n);
        let x12 = &id - &ks.x * &ks.y;
        let x22 = -(&id - &ks.y * &ks.x) * &ks.y;
        linalg::sym(&linalg::vstack(&[&linalg::hstack(&[&ks.x, &x12]), &linalg::hstack(&[&x12.transpose(), &x22])]))
    }

    #[test]
    fn recovery_round_trip_and_performance_bound() {
        let c = chain_case(2e-4, 0.9);
        let (open, unc, lqg) = parts(&c, MultiplierMode::FullBlock);
        let cl = lfr::close_loop(&open, &lqg, &c.q, &c.r, &c.perf).unwrap();
        let d = d_step(&cl, &unc).unwrap();
        let ks = k_step(&open, &unc, &d.lambda, &c.q, &c.r, &c.perf).unwrap();
        assert!(ks.objective <= d.gamma * d.gamma * (1.0 + 1e-6));
        let rec = recover_controller(&ks, &open).unwrap();
        let cl2 = lfr::close_loop(&open, &rec, &c.q, &c.r, &c.perf).unwrap();
        let xc = lyapunov_from(&ks);
        let nx = open.nx();
        let t = linalg::vstack(&[&linalg::hstack(&[&linalg::eye(nx), &ks.y]), &linalg::hstack(&[&Mat::zeros(nx, nx), &linalg::eye(nx)])]);
        let lhs = t.transpose() * &cl2.a_cal * &xc * &t;
        let (a, b) = (&open.a_hat, &open.b_hat);
        let rhs = linalg::vstack(&[
            &linalg::hstack(&[&(a * &ks.x + b * &ks.m), a]),
            &linalg::hstack(&[&ks.s, &(&ks.y * a + &ks.f * &open.c)]),
        ]);
        assert!((&lhs - &rhs).amax() < 1e-8 * (1.0 + rhs.amax()), "{}", (&lhs - &rhs).amax());
        let gap = &ks.w - &cl2.c_eps * &xc * cl2.c_eps.transpose();
        assert!(linalg::min_eig(&linalg::sym(&gap)) > -1e-8);
    }

    #[test]
    fn realization_choice_does_not_change_transfer() {
        let c = chain_case(2e-4, 0.9);
        let (open, unc, lqg) = parts(&c, MultiplierMode::FullBlock);
        let cl = lfr::close_loop(&open, &lqg, &c.q, &c.r, &c.perf).unwrap();
        let d = d_step(&cl, &unc).unwrap();
        let ks = k_step(&open, &unc, &d.lambda, &c.q, &c.r, &c.perf).unwrap();
        let mut rng = rng_for(3, 3);
        let g = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
        let v = g.qr().q();
        let h2 = |ctrl: &Controller| {
            let cl = lfr::close_loop(&open, ctrl, &c.q, &c.r, &c.perf).unwrap();
            lfr::h2_norm(&cl.a_cal, &cl.b_d, &cl.c_eps).unwrap()
        };
        let a = h2(&recover_controller(&ks, &open).unwrap());
        let b = h2(&recover_controller_with(&ks, &open, &v).unwrap());
        assert!((a - b).abs() < 1e-8 * a.max(1.0), "{a} vs {b}");
    }

    #[test]
    fn scalar_recovery_by_hand() {
        let open = OpenLoopLfr {
            a_hat: Mat::from_element(1, 1, 0.9),
            b_hat: Mat::from_element(1, 1, 0.5),
            j_delta: Mat::zeros(1, 2),
            e: Mat::from_element(1, 1, 1.0),
            c: Mat::from_element(1, 1, 2.0),
            theta_hat: v1(0.0),
        };
        let s = |v: f64| Mat::from_element(1, 1, v);
        let ks = KStep { x: s(2.0), y: s(0.25), m: s(-1.0), f: s(0.4), s: s(0.3), w: s(1.0), objective: 1.0, scale: 1.0 };
        let c = recover_controller(&ks, &open).unwrap();
        // U = 1 - 0.5 = 0.5; K = -2; L = 0.4
        // A_c = (0.3 - 0.25*0.9*2 - 0.4*2*2 - 0.25*0.5*(-1)) / 0.5 = (0.3 - 0.45 - 1.6 + 0.125) / 0.5
        assert!((c.k[(0, 0)] + 2.0).abs() < 1e-14);
        assert!((c.l[(0, 0)] - 0.4).abs() < 1e-14);
        assert!((c.a_c[(0, 0)] + 3.25).abs() < 1e-14);
    }
}
