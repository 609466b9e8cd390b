//! Linear fractional representation of the parametric uncertainty.
//!
//! With `ϑ̃ = ϑ - ϑ̂` and `Δ = I_nw ⊗ ϑ̃ᵀ`, the learned dynamics read
//! `[A(ϑ), B(ϑ)] = [Â, B̂] + E Δ J_Δ`, which closes into `p = Δ q` around a nominal loop.

use conic::{AffMat, Problem, Settings, Status};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{StructuredModel, FORMAT_VERSION};
use crate::serde_mat;
use crate::uq::UncertaintyEllipsoid;

/// `J_Δ = (I_nw ⊗ (P J)ᵀ)(vec(I_nw) ⊗ I_nz)` with `P` the commutation matrix of an `nw x nz` matrix.
pub fn j_delta(model: &StructuredModel) -> Mat {
    let (nw, nz) = (model.nw(), model.nz());
    let pj_t = (linalg::commutation(nw, nz) * &model.j).transpose();
    let lhs = linalg::eye(nw).kronecker(&pj_t);
    let rhs = linalg::vec(&linalg::eye(nw)).kronecker(&linalg::eye(nz));
    lhs * rhs
}

/// `Δ = I_nw ⊗ ϑ̃ᵀ`.
pub fn delta_matrix(tilde: &Vector, nw: usize) -> Mat {
    linalg::eye(nw).kronecker(&tilde.transpose())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopLfr {
    #[serde(with = "serde_mat::mat")]
    pub a_hat: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b_hat: Mat,
    #[serde(with = "serde_mat::mat")]
    pub j_delta: Mat,
    #[serde(with = "serde_mat::mat")]
    pub e: Mat,
    #[serde(with = "serde_mat::mat")]
    pub c: Mat,
    #[serde(with = "serde_mat::vector")]
    pub theta_hat: Vector,
}

impl OpenLoopLfr {
    pub fn nx(&self) -> usize {
        self.a_hat.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b_hat.ncols()
    }
    pub fn nw(&self) -> usize {
        self.e.ncols()
    }
    pub fn ny(&self) -> usize {
        self.c.nrows()
    }
    pub fn ntheta(&self) -> usize {
        self.theta_hat.len()
    }

    /// `(A(ϑ), B(ϑ))` through the LFR.
    pub fn dynamics(&self, theta: &Vector) -> (Mat, Mat) {
        let d = delta_matrix(&(theta - &self.theta_hat), self.nw());
        let g = &self.e * d * &self.j_delta;
        let nx = self.nx();
        (&self.a_hat + g.columns(0, nx), &self.b_hat + g.columns(nx, self.nu()))
    }
}

pub fn build_open_lfr(model: &StructuredModel, ell: &UncertaintyEllipsoid) -> Result<OpenLoopLfr> {
    if ell.dim() != model.ntheta() {
        return invalid("ellipsoid dimension does not match the model parameters");
    }
    let (a_hat, b_hat) = model.assemble_dynamics(&ell.theta_hat)?;
    Ok(OpenLoopLfr {
        a_hat,
        b_hat,
        j_delta: j_delta(model),
        e: model.e.clone(),
        c: model.c.clone(),
        theta_hat: ell.theta_hat.clone(),
    })
}

/// Performance output `ε = C_ε x + D_ε u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSpec {
    #[serde(with = "serde_mat::mat")]
    pub c_eps: Mat,
    #[serde(with = "serde_mat::mat")]
    pub d_eps: Mat,
}

impl PerformanceSpec {
    /// `C_ε = [C; 0]`, `D_ε = [0; r I]`.
    pub fn output_and_input(c: &Mat, nu: usize, r: f64) -> Self {
        let (ny, nx) = c.shape();
        let c_eps = linalg::vstack(&[c, &Mat::zeros(nu, nx)]);
        let d_eps = linalg::vstack(&[&Mat::zeros(ny, nu), &(linalg::eye(nu) * r)]);
        PerformanceSpec { c_eps, d_eps }
    }

    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if self.c_eps.ncols() != nx || self.d_eps.ncols() != nu || self.c_eps.nrows() != self.d_eps.nrows() {
            return invalid("performance output has inconsistent dimensions");
        }
        let cross = self.c_eps.transpose() * &self.d_eps;
        let scale = 1.0 + self.c_eps.norm() * self.d_eps.norm();
        if cross.amax() > 1e-12 * scale {
            return invalid("performance output must satisfy C_eps' D_eps = 0");
        }
        if linalg::min_eig(&self.r_c()) <= 0.0 {
            return invalid("D_eps must have full column rank");
        }
        Ok(())
    }

    pub fn q_c(&self) -> Mat {
        self.c_eps.transpose() * &self.c_eps
    }
    pub fn r_c(&self) -> Mat {
        self.d_eps.transpose() * &self.d_eps
    }
}

/// Dynamic output feedback `x_c+ = A_c x_c + L y`, `u = K x_c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    #[serde(with = "serde_mat::mat")]
    pub a_c: Mat,
    #[serde(with = "serde_mat::mat")]
    pub k: Mat,
    #[serde(with = "serde_mat::mat")]
    pub l: Mat,
}

/// Closed loop on `ξ = [x; x_c]` as `ξ+ = 𝒜̂ξ + B_p p + B_d d + B_ν ν`, `q = C_q ξ + D_qν ν`, `p = Δq`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLfr {
    #[serde(with = "serde_mat::mat")]
    pub a_cal: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b_p: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b_d: Mat,
    #[serde(with = "serde_mat::mat")]
    pub c_q: Mat,
    #[serde(with = "serde_mat::mat")]
    pub c_eps: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b_nu: Mat,
    #[serde(with = "serde_mat::mat")]
    pub d_q_nu: Mat,
    /// `Ξ = [[I, 0], [0, K]]`, mapping `ξ` to `(x, u)`.
    #[serde(with = "serde_mat::mat")]
    pub xi: Mat,
    pub nw: usize,
    #[serde(with = "serde_mat::vector")]
    pub theta_hat: Vector,
}

impl ClosedLoopLfr {
    pub fn n(&self) -> usize {
        self.a_cal.nrows()
    }
    pub fn ntheta(&self) -> usize {
        self.theta_hat.len()
    }

    pub fn delta(&self, theta: &Vector) -> Mat {
        delta_matrix(&(theta - &self.theta_hat), self.nw)
    }

    /// `𝒜(ϑ) = 𝒜̂ + B_p Δ C_q`.
    pub fn a_of(&self, theta: &Vector) -> Mat {
        &self.a_cal + &self.b_p * self.delta(theta) * &self.c_q
    }

    /// `B_ν(ϑ) = B̂_ν + B_p Δ D_qν`.
    pub fn b_nu_of(&self, theta: &Vector) -> Mat {
        &self.b_nu + &self.b_p * self.delta(theta) * &self.d_q_nu
    }

    pub fn h2_of(&self, theta: &Vector) -> Option<f64> {
        h2_norm(&self.a_of(theta), &self.b_d, &self.c_eps)
    }
}

/// H2 norm of `(A, B, C)` from the discrete Lyapunov equation; `None` if `A` is not Schur.
pub fn h2_norm(a: &Mat, b: &Mat, c: &Mat) -> Option<f64> {
    if linalg::spectral_radius(a) >= 1.0 {
        return None;
    }
    let x = linalg::dlyap(a, &(b * b.transpose()))?;
    Some((c * x * c.transpose()).trace().max(0.0).sqrt())
}

pub fn close_loop(open: &OpenLoopLfr, ctrl: &Controller, q: &Mat, r: &Mat, perf: &PerformanceSpec) -> Result<ClosedLoopLfr> {
    let (nx, nu, nw, ny) = (open.nx(), open.nu(), open.nw(), open.ny());
    if ctrl.a_c.shape() != (nx, nx) || ctrl.k.shape() != (nu, nx) || ctrl.l.shape() != (nx, ny) {
        return invalid("controller dimensions do not match the plant");
    }
    if q.shape() != (nw, nw) || r.shape() != (ny, ny) {
        return invalid("noise covariances do not match the plant");
    }
    perf.validate(nx, nu)?;
    let z = |r: usize, c: usize| Mat::zeros(r, c);
    let a_cal = linalg::vstack(&[
        &linalg::hstack(&[&open.a_hat, &(&open.b_hat * &ctrl.k)]),
        &linalg::hstack(&[&(&ctrl.l * &open.c), &ctrl.a_c]),
    ]);
    let b_p = linalg::vstack(&[&open.e, &z(nx, nw)]);
    let b_d = linalg::block_diag(&[&(&open.e * linalg::psd_sqrt(q)), &(&ctrl.l * linalg::psd_sqrt(r))]);
    let xi = linalg::block_diag(&[&linalg::eye(nx), &ctrl.k]);
    let c_q = &open.j_delta * &xi;
    let c_eps = linalg::hstack(&[&perf.c_eps, &(&perf.d_eps * &ctrl.k)]);
    let b_nu = linalg::vstack(&[&open.b_hat, &z(nx, nu)]);
    let d_q_nu = open.j_delta.columns(nx, nu).into_owned();
    Ok(ClosedLoopLfr { a_cal, b_p, b_d, c_q, c_eps, b_nu, d_q_nu, xi, nw, theta_hat: open.theta_hat.clone() })
}

fn check_psd(lambda: &Mat) -> Result<()> {
    if !lambda.is_square() || linalg::min_eig(&linalg::sym(lambda)) < -1e-12 * (1.0 + lambda.amax()) {
        return invalid("multiplier must be positive semidefinite");
    }
    Ok(())
}

fn multiplier_form(delta: &Mat, ell: &UncertaintyEllipsoid, lambda: &Mat) -> Result<Mat> {
    let nw = lambda.nrows();
    let nth = ell.dim();
    if delta.shape() != (nw, nw * nth) {
        return invalid("Delta does not have the I ⊗ ϑᵀ shape");
    }
    check_psd(lambda)?;
    let sinv = linalg::inv_spd(&ell.sigma_theta_delta).ok_or_else(|| Error::Numerical("ellipsoid shape is singular".into()))?;
    // P = diag(-Λ ⊗ Σ^{-1}, Λ) evaluated on [Δᵀ; I]
    let p = linalg::block_diag(&[&(-lambda.kronecker(&sinv)), lambda]);
    let s = linalg::vstack(&[&delta.transpose(), &linalg::eye(nw)]);
    Ok(linalg::sym(&(s.transpose() * p * s)))
}

/// Minimum eigenvalue of the multiplier quadratic form at `Δ`; non-negative iff `Λ` certifies `Δ`.
pub fn multiplier_feasibility(delta: &Mat, ell: &UncertaintyEllipsoid, lambda: &Mat) -> Result<f64> {
    Ok(linalg::min_eig(&multiplier_form(delta, ell, lambda)?))
}

/// Same check for the lifted set `{M Δ}` with a full column rank `M` such as `B_p`.
pub fn lifted_multiplier_feasibility(delta: &Mat, ell: &UncertaintyEllipsoid, lambda: &Mat, m: &Mat) -> Result<f64> {
    if m.ncols() != lambda.nrows() || linalg::rank(m, 1e-10) != m.ncols() {
        return invalid("lifting matrix must have full column rank");
    }
    let form = multiplier_form(delta, ell, lambda)?;
    Ok(linalg::min_eig(&linalg::sym(&(m * form * m.transpose()))))
}

/// `{Δ J_Δ : Δ J_Δ D (Δ J_Δ)ᵀ ⪯ bound · I}`, a norm-bounded outer set for the ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverapproxSet {
    pub version: u32,
    #[serde(with = "serde_mat::mat")]
    pub d: Mat,
    pub bound: f64,
}

/// `Σ^{1/2}ᵀ Jᵀ (D ⊗ I_nw) J Σ^{1/2}`.
pub fn overapprox_m(sigma_half: &Mat, j: &Mat, d: &Mat, nw: usize) -> Mat {
    let jl = j * sigma_half;
    linalg::sym(&(jl.transpose() * d.kronecker(&linalg::eye(nw)) * jl))
}

/// Picks `D ⪰ 0` minimising the condition number of `M` (`I ⪯ M ⪯ tI`).
pub fn optimize_overapprox_d(ell: &UncertaintyEllipsoid, j: &Mat, nw: usize) -> Result<OverapproxSet> {
    let nth = ell.dim();
    if j.ncols() != nth || j.nrows() % nw != 0 {
        return invalid("J does not match the ellipsoid and disturbance dimensions");
    }
    let nz = j.nrows() / nw;
    // Solving with Σ/s leaves M invariant if D is rescaled by 1/s afterwards.
    let s = linalg::max_eig(&ell.sigma_theta_delta);
    let lhalf = linalg::cholesky(&(&ell.sigma_theta_delta / s)).ok_or_else(|| Error::Numerical("ellipsoid shape is singular".into()))?;
    let jl = j * &lhalf;

    let mut prob = Problem::new();
    let d = prob.symmetric(nz);
    let t = prob.scalar();
    let m = d.kron_identity(nw).congruence(&jl.transpose()).symmetrize();
    prob.psd(&d);
    prob.psd(&m.add_const(&(-linalg::eye(nth))));
    prob.psd(&AffMat::scaled_identity(nth, &t).sub(&m));
    prob.minimize(t.clone());
    let sol = prob.solve_retrying(&Settings::default());
    match sol.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(Error::Infeasible("no D normalises the ellipsoid; J may be rank deficient".into())),
        st => return Err(Error::Solver(format!("over-approximation SDP ended with {st:?}"))),
    }
    let d_hat = linalg::sym(&sol.matrix(&d));
    if linalg::cholesky(&d_hat).is_none() {
        return Err(Error::Numerical("over-approximation D is not positive definite".into()));
    }
    let d_val = d_hat / s;
    let bound = linalg::max_eig(&overapprox_m(&linalg::cholesky(&ell.sigma_theta_delta).unwrap(), j, &d_val, nw));
    Ok(OverapproxSet { version: FORMAT_VERSION, d: d_val, bound })
}
