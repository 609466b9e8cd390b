//! Observed information and ellipsoidal confidence sets for ϑ.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::gamma_lr;

use crate::data::IoData;
use crate::error::{invalid, Error, Result};
use crate::gem::conditional_loglik_grad_theta;
use crate::linalg::{self, Mat, Vector};
use crate::model::{ModelParams, StructuredModel, FORMAT_VERSION};
use crate::serde_mat;
use crate::sim::gaussian_vec;
use crate::smoother::{kalman_loglik, rts_smooth};

fn fd_steps(theta: &Vector) -> Vec<f64> {
    theta.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect()
}

fn with_theta(params: &ModelParams, theta: Vector) -> ModelParams {
    ModelParams { theta, ..params.clone() }
}

fn perturbed(theta: &Vector, moves: &[(usize, f64)]) -> Vector {
    let mut t = theta.clone();
    for &(i, d) in moves {
        t[i] += d;
    }
    t
}

/// `-∂²/∂ϑ² log p(Y)` at fixed covariance parameters, by central differences of the filter
/// log-likelihood.
pub fn observed_information(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<Mat> {
    let n = model.ntheta();
    let th = &params.theta;
    let h = fd_steps(th);
    let ll = |t: Vector| kalman_loglik(model, &with_theta(params, t), data);
    let f0 = ll(th.clone())?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let vals: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if i == j {
                let fp = ll(perturbed(th, &[(i, h[i])]))?;
                let fm = ll(perturbed(th, &[(i, -h[i])]))?;
                Ok((fp - 2.0 * f0 + fm) / (h[i] * h[i]))
            } else {
                let fpp = ll(perturbed(th, &[(i, h[i]), (j, h[j])]))?;
                let fpm = ll(perturbed(th, &[(i, h[i]), (j, -h[j])]))?;
                let fmp = ll(perturbed(th, &[(i, -h[i]), (j, h[j])]))?;
                let fmm = ll(perturbed(th, &[(i, -h[i]), (j, -h[j])]))?;
                Ok((fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]))
            }
        })
        .collect();
    let mut hess = Mat::zeros(n, n);
    for (&(i, j), v) in pairs.iter().zip(vals) {
        let v = v?;
        hess[(i, j)] = -v;
        hess[(j, i)] = -v;
    }
    check_information(&hess)?;
    Ok(hess)
}

/// The log-likelihood gradient in ϑ, from the smoothed score identity.
pub fn score(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<Vector> {
    let sm = rts_smooth(model, params, data)?;
    conditional_loglik_grad_theta(model, params, &sm.stats)
}

/// Observed information from central differences of the analytic score.
pub fn observed_information_from_score(model: &StructuredModel, params: &ModelParams, data: &IoData) -> Result<Mat> {
    let n = model.ntheta();
    let th = &params.theta;
    let h = fd_steps(th);
    let cols: Vec<Result<Vector>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sp = score(model, &with_theta(params, perturbed(th, &[(i, h[i])])), data)?;
            let sm = score(model, &with_theta(params, perturbed(th, &[(i, -h[i])])), data)?;
            Ok((sm - sp) / (2.0 * h[i]))
        })
        .collect();
    let mut hess = Mat::zeros(n, n);
    for (i, c) in cols.into_iter().enumerate() {
        hess.set_column(i, &c?);
    }
    let hess = linalg::sym(&hess);
    check_information(&hess)?;
    Ok(hess)
}

fn check_information(h: &Mat) -> Result<()> {
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite observed information".into()));
    }
    let lmin = linalg::min_eig(h);
    if lmin <= 0.0 {
        return Err(Error::NonIdentifiable(format!(
            "parameters not identifiable from this data (observed information has eigenvalue {lmin:.3e})"
        )));
    }
    Ok(())
}

/// Quantile of the chi-squared distribution with `k` degrees of freedom.
pub fn chi2_quantile(k: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) || k == 0 {
        return invalid(format!("chi-squared quantile needs k >= 1 and p in (0,1), got k={k}, p={p}"));
    }
    let a = k as f64 / 2.0;
    let cdf = |x: f64| gamma_lr(a, x / 2.0);
    let (mut lo, mut hi) = (0.0, k as f64 + 10.0);
    while cdf(hi) < p {
        hi *= 2.0;
    }
    while hi - lo > 1e-10 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// The set `{ϑ : (ϑ-ϑ̂)ᵀ Σ_δ^{-1} (ϑ-ϑ̂) ≤ 1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEllipsoid {
    pub version: u32,
    #[serde(with = "serde_mat::vector")]
    pub theta_hat: Vector,
    /// Inverse observed information.
    #[serde(with = "serde_mat::mat")]
    pub sigma_theta: Mat,
    pub delta: f64,
    pub chi2: f64,
    #[serde(with = "serde_mat::mat")]
    pub sigma_theta_delta: Mat,
}

pub fn confidence_ellipsoid(theta_hat: &Vector, info: &Mat, delta: f64) -> Result<UncertaintyEllipsoid> {
    if !(delta > 0.0 && delta < 1.0) {
        return invalid(format!("delta must lie in (0,1), got {delta}"));
    }
    if info.nrows() != theta_hat.len() || !info.is_square() {
        return invalid("information matrix does not match the parameter dimension");
    }
    check_information(info)?;
    let sigma = linalg::sym(&linalg::inv_spd(info).ok_or_else(|| Error::NonIdentifiable("information matrix is singular".into()))?);
    let chi2 = chi2_quantile(theta_hat.len(), delta)?;
    Ok(UncertaintyEllipsoid {
        version: FORMAT_VERSION,
        theta_hat: theta_hat.clone(),
        sigma_theta_delta: &sigma * chi2,
        sigma_theta: sigma,
        delta,
        chi2,
    })
}

impl UncertaintyEllipsoid {
    /// Ellipsoid from a parameter covariance `Σ_ϑ` (scaled by the χ² quantile).
    pub fn from_covariance(theta_hat: Vector, sigma_theta: Mat, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return invalid(format!("delta must lie in (0,1), got {delta}"));
        }
        if sigma_theta.shape() != (theta_hat.len(), theta_hat.len()) || linalg::cholesky(&sigma_theta).is_none() {
            return invalid("parameter covariance must be positive definite and match the parameter dimension");
        }
        let chi2 = chi2_quantile(theta_hat.len(), delta)?;
        Ok(UncertaintyEllipsoid {
            version: FORMAT_VERSION,
            theta_hat,
            sigma_theta_delta: &sigma_theta * chi2,
            sigma_theta,
            delta,
            chi2,
        })
    }

    /// Same centre and covariance at another confidence level.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::from_covariance(self.theta_hat.clone(), self.sigma_theta.clone(), delta)
    }

    pub fn dim(&self) -> usize {
        self.theta_hat.len()
    }

    /// `(ϑ-ϑ̂)ᵀ Σ_δ^{-1} (ϑ-ϑ̂)`.
    pub fn quadratic_form(&self, theta: &Vector) -> f64 {
        let d = theta - &self.theta_hat;
        let l = linalg::cholesky(&self.sigma_theta_delta).expect("ellipsoid shape is positive definite");
        let z = l.solve_lower_triangular(&d).unwrap();
        z.norm_squared()
    }

    pub fn contains(&self, theta: &Vector) -> bool {
        self.quadratic_form(theta) <= 1.0
    }

    /// Lower Cholesky factor of `Σ_δ`, mapping the unit ball onto the ellipsoid.
    pub fn shape_factor(&self) -> Mat {
        linalg::cholesky(&self.sigma_theta_delta).expect("ellipsoid shape is positive definite")
    }

    /// Uniform direction on the boundary.
    pub fn sample_boundary<R: Rng>(&self, rng: &mut R) -> Vector {
        let g = gaussian_vec(rng, self.dim());
        &self.theta_hat + self.shape_factor() * (&g / g.norm())
    }

    /// Uniform in the ellipsoid.
    pub fn sample_inside<R: Rng>(&self, rng: &mut R) -> Vector {
        let g = gaussian_vec(rng, self.dim());
        let r = rng.gen::<f64>().powf(1.0 / self.dim() as f64);
        &self.theta_hat + self.shape_factor() * (&g * (r / g.norm()))
    }

    /// Half of the samples on the boundary, the rest spread with radius biased outwards.
    pub fn sample_boundary_biased<R: Rng>(&self, rng: &mut R) -> Vector {
        if rng.gen_bool(0.5) {
            self.sample_boundary(rng)
        } else {
            let g = gaussian_vec(rng, self.dim());
            let r = rng.gen::<f64>().powf(0.25);
            &self.theta_hat + self.shape_factor() * (&g * (r / g.norm()))
        }
    }
}

/// Scales the free process and measurement covariances by `factor`, an optional safety margin
/// against under-estimated noise.
pub fn inflate_covariances(model: &StructuredModel, params: &ModelParams, factor: f64) -> Result<ModelParams> {
    if !(factor >= 1.0) {
        return invalid(format!("inflation factor must be at least 1, got {factor}"));
    }
    let (q, r) = model.assemble_covariances(params)?;
    Ok(model.params_from_covariances(params.theta.clone(), &(q * factor), &(r * factor), params.x0_mean.clone(), params.x0_cov.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{single_block, BlockKind};
    use crate::sim::rng_for;

    #[test]
    fn chi2_quantiles_match_tables() {
        assert!((chi2_quantile(1, 0.95).unwrap() - 3.841_458_820_694_124).abs() < 1e-8);
        assert!((chi2_quantile(8, 0.9).unwrap() - 13.361_566_136_511_1).abs() < 1e-7);
        assert!((chi2_quantile(23, 0.95).unwrap() - 35.172_461_626_908_6).abs() < 1e-7);
        assert!(chi2_quantile(3, 1.0).is_err());
    }

    #[test]
    fn one_dimensional_interval() {
        let h = Mat::from_element(1, 1, 16.0);
        let e = confidence_ellipsoid(&Vector::from_element(1, 2.0), &h, 0.95).unwrap();
        let half = 1.959_963_984_540_054 / 4.0;
        assert!((e.quadratic_form(&Vector::from_element(1, 2.0 + half)) - 1.0).abs() < 1e-9);
        assert!(e.contains(&Vector::from_element(1, 2.0 - 0.99 * half)));
        assert!(!e.contains(&Vector::from_element(1, 2.0 - 1.01 * half)));
    }

    #[test]
    fn boundary_samples_have_unit_form() {
        let info = Mat::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let e = confidence_ellipsoid(&Vector::from_vec(vec![1.0, -1.0, 0.5]), &info, 0.9).unwrap();
        let mut rng = rng_for(3, 0);
        for _ in 0..100 {
            assert!((e.quadratic_form(&e.sample_boundary(&mut rng)) - 1.0).abs() < 1e-10);
            assert!(e.quadratic_form(&e.sample_inside(&mut rng)) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn autoregression_information_matches_regression_formula() {
        // x+ = a x + w observed almost perfectly: information ≈ Σ x_t² / q
        let model = StructuredModel {
            version: FORMAT_VERSION,
            a0: Mat::zeros(1, 1),
            b0: Mat::zeros(1, 1),
            e: Mat::identity(1, 1),
            c: Mat::identity(1, 1),
            j: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            theta0: Vector::zeros(2),
            q_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            r_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            theta_box: crate::model::default_theta_box(),
            cov_eig_bounds: (1e-12, 1e6),
        };
        let params = ModelParams {
            theta: Vector::from_element(1, 0.8),
            eta_q: Vector::from_element(1, 1.0),
            eta_r: Vector::from_element(1, 1e-8),
            x0_mean: Vector::zeros(1),
            x0_cov: Mat::from_element(1, 1, 1.0),
        };
        let mut rng = rng_for(11, 0);
        let mut x = 0.0;
        let mut data = IoData { u: vec![], y: vec![] };
        let mut sxx = 0.0;
        for _ in 0..4000 {
            sxx += x * x;
            x = 0.8 * x + gaussian_vec(&mut rng, 1)[0];
            data.u.push(Vector::zeros(1));
            data.y.push(Vector::from_element(1, x + 1e-4 * gaussian_vec(&mut rng, 1)[0]));
        }
        let h = observed_information(&model, &params, &data).unwrap();
        assert!((h[(0, 0)] / sxx - 1.0).abs() < 0.1, "{} vs {}", h[(0, 0)], sxx);
    }

    #[test]
    fn two_hessian_schemes_agree() {
        let truth = crate::sim::build_msd_chain(2, 5);
        let data = crate::sim::generate_data(&truth, 400, 2.0, 8).unwrap();
        let h1 = observed_information(&truth.model, &truth.params, &data).unwrap();
        let h2 = observed_information_from_score(&truth.model, &truth.params, &data).unwrap();
        let rel = (&h1 - &h2).norm() / h1.norm();
        assert!(rel < 1e-3, "relative gap {rel}");
    }
}
