//! Kalman filter log-likelihood, Rauch–Tung–Striebel smoothing and the averaged moments
//! that the EM iterations consume.

use crate::data::IoData;
use crate::error::{Error, Result};
use crate::linalg::{self, hstack, Mat, Vector};
use crate::model::{ModelParams, StructuredModel};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Smoothed second moments, all averaged by `1/T`.
#[derive(Clone, Debug)]
pub struct SufficientStats {
    pub t: usize,
    /// `E[(E†x_{t+1})(E†x_{t+1})ᵀ]`, `n_w x n_w`.
    pub phi_plus: Mat,
    /// `E[(E†x_{t+1}) φ_tᵀ]` with `φ_t = [x_t; u_t]`, `n_w x (n_x+n_u)`.
    pub psi_plus_phi: Mat,
    /// `E[φ_t φ_tᵀ]`.
    pub sigma_phi: Mat,
    /// `y_t y_tᵀ`.
    pub phi_y: Mat,
    /// `E[y_t x_tᵀ]`, `n_y x n_x`.
    pub psi_xy: Mat,
    /// `E[x_t x_tᵀ]` over `t = 1..T`.
    pub sigma_x: Mat,
    pub x0_mean: Vector,
    pub x0_cov: Mat,
}

#[derive(Clone, Debug)]
pub struct SmootherOutput {
    pub loglik: f64,
    /// Smoothed means `x_{t|T}`, `t = 0..T`.
    pub means: Vec<Vector>,
    /// Smoothed covariances `P_{t|T}`.
    pub covs: Vec<Mat>,
    /// `Cov(x_{t+1}, x_t | Y)`, `t = 0..T-1`.
    pub lag1: Vec<Mat>,
    pub stats: SufficientStats,
}

struct System {
    a: Mat,
    b: Mat,
    c: Mat,
    qe: Mat,
    r: Mat,
    x0: Vector,
    p0: Mat,
}

fn system(model: &StructuredModel, params: &ModelParams) -> Result<System> {
    let (a, b) = model.assemble_dynamics(&params.theta)?;
    let (q, r) = model.covariances_unchecked(params);
    let qe = linalg::sym(&(&model.e * q * model.e.transpose()));
    Ok(System { a, b, c: model.c.clone(), qe, r, x0: params.x0_mean.clone(), p0: linalg::sym(&params.x0_cov) })
}

fn check_inputs(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<()> {
    model.validate_params(params)?;
    data.validate(model.nu(), model.ny())
}

struct FilterTrace {
    loglik: f64,
    /// predicted `x_{t|t-1}`, `P_{t|t-1}` for t = 1..T (index t-1)
    xp: Vec<Vector>,
    pp: Vec<Mat>,
    /// filtered `x_{t|t}`, `P_{t|t}` for t = 0..T
    xf: Vec<Vector>,
    pf: Vec<Mat>,
    sq_err: f64,
}

fn run_filter(s: &System, data: &IoData, keep: bool) -> Result<FilterTrace> {
    let nx = s.a.nrows();
    let t_len = data.len();
    let id = linalg::eye(nx);
    let mut x = s.x0.clone();
    let mut p = s.p0.clone();
    let mut tr = FilterTrace { loglik: 0.0, xp: Vec::new(), pp: Vec::new(), xf: Vec::new(), pf: Vec::new(), sq_err: 0.0 };
    if keep {
        tr.xp.reserve(t_len);
        tr.pp.reserve(t_len);
        tr.xf.reserve(t_len + 1);
        tr.pf.reserve(t_len + 1);
        tr.xf.push(x.clone());
        tr.pf.push(p.clone());
    }
    let ct = s.c.transpose();
    for t in 0..t_len {
        let xp = &s.a * &x + &s.b * &data.u[t];
        let pp = linalg::sym(&(&s.a * &p * s.a.transpose() + &s.qe));
        let pct = &pp * &ct;
        let sm = linalg::sym(&(&s.c * &pct + &s.r));
        let chol = sm
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical(format!("innovation covariance not positive definite at t = {}", t + 1)))?;
        let e = &data.y[t] - &s.c * &xp;
        let sinv_e = chol.solve(&e);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        tr.loglik -= 0.5 * (logdet + e.dot(&sinv_e) + e.len() as f64 * LN_2PI);
        tr.sq_err += e.norm_squared();
        // K = P C' S^{-1}
        let k = chol.solve(&pct.transpose()).transpose();
        x = &xp + &k * e;
        let ikc = &id - &k * &s.c;
        p = linalg::sym(&(&ikc * &pp * ikc.transpose() + &k * &s.r * k.transpose()));
        if keep {
            tr.xp.push(xp);
            tr.pp.push(pp);
            tr.xf.push(x.clone());
            tr.pf.push(p.clone());
        }
    }
    if !tr.loglik.is_finite() {
        return Err(Error::Numerical("non-finite log-likelihood".into()));
    }
    Ok(tr)
}

pub fn kalman_loglik(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<f64> {
    check_inputs(model, params, data)?;
    let s = system(model, params)?;
    Ok(run_filter(&s, data, false)?.loglik)
}

/// Mean squared one-step-ahead output prediction error.
pub fn one_step_mse(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<f64> {
    check_inputs(model, params, data)?;
    let s = system(model, params)?;
    Ok(run_filter(&s, data, false)?.sq_err / data.len() as f64)
}

pub fn rts_smooth(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<SmootherOutput> {
    check_inputs(model, params, data)?;
    let s = system(model, params)?;
    let f = run_filter(&s, data, true)?;
    let t_len = data.len();
    let mut means = vec![Vector::zeros(0); t_len + 1];
    let mut covs = vec![Mat::zeros(0, 0); t_len + 1];
    let mut lag1 = vec![Mat::zeros(0, 0); t_len];
    means[t_len] = f.xf[t_len].clone();
    covs[t_len] = f.pf[t_len].clone();
    for t in (0..t_len).rev() {
        let pp = &f.pp[t];
        // Gᵀ = P_{t+1|t}^{-1} A P_{t|t}
        let rhs = &s.a * &f.pf[t];
        let gt = match pp.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => linalg::pinv(pp, 1e-12) * &rhs,
        };
        let g = gt.transpose();
        means[t] = &f.xf[t] + &g * (&means[t + 1] - &f.xp[t]);
        covs[t] = linalg::sym(&(&f.pf[t] + &g * (&covs[t + 1] - pp) * &gt));
        lag1[t] = &covs[t + 1] * &gt;
    }
    let stats = moments(model, data, &means, &covs, &lag1);
    Ok(SmootherOutput { loglik: f.loglik, means, covs, lag1, stats })
}

fn moments(model: &StructuredModel, data: &IoData, means: &[Vector], covs: &[Mat], lag1: &[Mat]) -> SufficientStats {
    let (nx, nu, ny) = (model.nx(), model.nu(), model.ny());
    let t_len = data.len();
    let mut s11 = Mat::zeros(nx, nx);
    let mut s10 = Mat::zeros(nx, nx);
    let mut s1u = Mat::zeros(nx, nu);
    let mut s00 = Mat::zeros(nx, nx);
    let mut s0u = Mat::zeros(nx, nu);
    let mut suu = Mat::zeros(nu, nu);
    let mut phi_y = Mat::zeros(ny, ny);
    let mut psi_xy = Mat::zeros(ny, nx);
    for t in 0..t_len {
        let (m0, m1, u, y) = (&means[t], &means[t + 1], &data.u[t], &data.y[t]);
        let m1t = m1.transpose();
        s11 += m1 * &m1t + &covs[t + 1];
        s10 += m1 * m0.transpose() + &lag1[t];
        s1u += m1 * u.transpose();
        s00 += m0 * m0.transpose() + &covs[t];
        s0u += m0 * u.transpose();
        suu += u * u.transpose();
        phi_y += y * y.transpose();
        psi_xy += y * &m1t;
    }
    let inv_t = 1.0 / t_len as f64;
    // Σ_x over t = 1..T equals s11
    let sigma_x = linalg::sym(&(&s11 * inv_t));
    let ep = model.e_pinv();
    let phi_plus = linalg::sym(&(&ep * &s11 * ep.transpose() * inv_t));
    let psi_plus_phi = &ep * hstack(&[&s10, &s1u]) * inv_t;
    let mut sigma_phi = Mat::zeros(nx + nu, nx + nu);
    sigma_phi.view_mut((0, 0), (nx, nx)).copy_from(&s00);
    sigma_phi.view_mut((0, nx), (nx, nu)).copy_from(&s0u);
    sigma_phi.view_mut((nx, 0), (nu, nx)).copy_from(&s0u.transpose());
    sigma_phi.view_mut((nx, nx), (nu, nu)).copy_from(&suu);
    SufficientStats {
        t: t_len,
        phi_plus,
        psi_plus_phi,
        sigma_phi: linalg::sym(&(sigma_phi * inv_t)),
        phi_y: linalg::sym(&(phi_y * inv_t)),
        psi_xy: psi_xy * inv_t,
        sigma_x,
        x0_mean: means[0].clone(),
        x0_cov: covs[0].clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{single_block, BlockKind, FORMAT_VERSION};

    pub(crate) fn scalar_ar1(a: f64, q: f64, r: f64) -> (StructuredModel, ModelParams) {
        let m = StructuredModel {
            version: FORMAT_VERSION,
            a0: Mat::zeros(1, 1),
            b0: Mat::zeros(1, 1),
            e: Mat::identity(1, 1),
            c: Mat::identity(1, 1),
            j: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            theta0: Vector::from_vec(vec![0.0, 1.0]),
            q_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            r_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            theta_box: crate::model::default_theta_box(),
            cov_eig_bounds: (1e-12, 1e6),
        };
        let p = ModelParams {
            theta: Vector::from_element(1, a),
            eta_q: Vector::from_element(1, q),
            eta_r: Vector::from_element(1, r),
            x0_mean: Vector::from_element(1, 0.3),
            x0_cov: Mat::from_element(1, 1, 0.7),
        };
        (m, p)
    }

    fn small_data() -> IoData {
        let u = [0.5, -1.0, 0.25, 2.0, 0.0];
        let y = [0.9, -0.2, 0.4, 1.7, 1.1];
        IoData {
            u: u.iter().map(|&v| Vector::from_element(1, v)).collect(),
            y: y.iter().map(|&v| Vector::from_element(1, v)).collect(),
        }
    }

    /// Joint Gaussian of (x_0..x_T, y_1..y_T) built directly, as an independent route.
    fn joint_gaussian(a: f64, q: f64, r: f64, x0: f64, p0: f64, u: &[f64]) -> (Vector, Mat) {
        let t = u.len();
        let nx = t + 1;
        // x = M z + c, z = (x0 - mean, w_0..w_{T-1})
        let mut mx = Mat::zeros(nx, nx);
        let mut cx = Vector::zeros(nx);
        mx[(0, 0)] = 1.0;
        cx[0] = x0;
        for k in 1..nx {
            for j in 0..nx {
                mx[(k, j)] = a * mx[(k - 1, j)];
            }
            mx[(k, k)] += 1.0;
            cx[k] = a * cx[k - 1] + u[k - 1];
        }
        let mut dz = Vector::from_element(nx, q);
        dz[0] = p0;
        let cov_x = &mx * Mat::from_diagonal(&dz) * mx.transpose();
        let n = nx + t;
        let mut mean = Vector::zeros(n);
        let mut cov = Mat::zeros(n, n);
        mean.rows_mut(0, nx).copy_from(&cx);
        mean.rows_mut(nx, t).copy_from(&cx.rows(1, t));
        cov.view_mut((0, 0), (nx, nx)).copy_from(&cov_x);
        let sel = cov_x.rows(1, t).into_owned();
        cov.view_mut((nx, 0), (t, nx)).copy_from(&sel);
        cov.view_mut((0, nx), (nx, t)).copy_from(&sel.transpose());
        let cyy = cov_x.view((1, 1), (t, t)).into_owned() + Mat::identity(t, t) * r;
        cov.view_mut((nx, nx), (t, t)).copy_from(&cyy);
        (mean, cov)
    }

    #[test]
    fn scalar_loglik_matches_joint_density() {
        let (m, p) = scalar_ar1(0.8, 0.2, 0.1);
        let d = small_data();
        let u: Vec<f64> = d.u.iter().map(|v| v[0]).collect();
        let (mean, cov) = joint_gaussian(0.8, 0.2, 0.1, 0.3, 0.7, &u);
        let t = u.len();
        let nx = t + 1;
        let my = mean.rows(nx, t).into_owned();
        let cyy = cov.view((nx, nx), (t, t)).into_owned();
        let y = Vector::from_iterator(t, d.y.iter().map(|v| v[0]));
        let e = &y - &my;
        let ll = -0.5 * (linalg::logdet_spd(&cyy).unwrap() + e.dot(&(cyy.clone().try_inverse().unwrap() * &e)) + t as f64 * LN_2PI);
        let got = kalman_loglik(&m, &p, &d).unwrap();
        assert!((got - ll).abs() < 1e-12 * ll.abs().max(1.0), "{got} vs {ll}");
    }

    #[test]
    fn scalar_smoother_matches_gaussian_conditioning() {
        let (m, p) = scalar_ar1(0.8, 0.2, 0.1);
        let d = small_data();
        let u: Vec<f64> = d.u.iter().map(|v| v[0]).collect();
        let (mean, cov) = joint_gaussian(0.8, 0.2, 0.1, 0.3, 0.7, &u);
        let t = u.len();
        let nx = t + 1;
        let y = Vector::from_iterator(t, d.y.iter().map(|v| v[0]));
        let cyy = cov.view((nx, nx), (t, t)).into_owned();
        let cxy = cov.view((0, nx), (nx, t)).into_owned();
        let gain = &cxy * cyy.try_inverse().unwrap();
        let post_mean = mean.rows(0, nx) + &gain * (y - mean.rows(nx, t));
        let post_cov = cov.view((0, 0), (nx, nx)) - &gain * cxy.transpose();
        let out = rts_smooth(&m, &p, &d).unwrap();
        for k in 0..nx {
            assert!((out.means[k][0] - post_mean[k]).abs() < 1e-12);
            assert!((out.covs[k][(0, 0)] - post_cov[(k, k)]).abs() < 1e-12);
        }
        for k in 0..t {
            assert!((out.lag1[k][(0, 0)] - post_cov[(k + 1, k)]).abs() < 1e-12);
        }
    }
}
