//! Structured linear Gaussian state-space models.
//!
//! The unknown part of the dynamics enters through the noise input matrix `E`:
//! `[A, B] = [A0, B0] + E unvec(J ϑ + ϑ0)` with `unvec` producing an `n_w x (n_x+n_u)` matrix.
//! Covariances are sums of projected blocks `Q = Σ Π_iᵀ Q_i Π_i`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{self, hstack, Mat, Vector};
use crate::serde_mat;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockKind {
    /// `Q_i = Q0`, no free parameters.
    Fixed {
        #[serde(with = "serde_mat::mat")]
        q0: Mat,
    },
    /// `Q_i = λ Q0` with one positive parameter λ.
    Scaled {
        #[serde(with = "serde_mat::mat")]
        q0: Mat,
    },
    /// `Q_i = L Lᵀ` with `L` lower triangular; parameters are `vech(L)`.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovBlock {
    /// `k_i x n` row selector; the stacked projectors form an orthogonal matrix.
    #[serde(with = "serde_mat::mat")]
    pub projector: Mat,
    #[serde(flatten)]
    pub kind: BlockKind,
}

impl CovBlock {
    pub fn dim(&self) -> usize {
        self.projector.nrows()
    }

    pub fn num_params(&self) -> usize {
        match self.kind {
            BlockKind::Fixed { .. } => 0,
            BlockKind::Scaled { .. } => 1,
            BlockKind::Full => self.dim() * (self.dim() + 1) / 2,
        }
    }

    /// The block covariance `Q_i` for its parameter slice.
    pub fn covariance(&self, eta: &[f64]) -> Mat {
        match &self.kind {
            BlockKind::Fixed { q0 } => q0.clone(),
            BlockKind::Scaled { q0 } => q0 * eta[0],
            BlockKind::Full => {
                let l = linalg::unvech_lower(eta, self.dim());
                &l * l.transpose()
            }
        }
    }

    /// Parameters reproducing a given block covariance (best fit for `Scaled`).
    pub fn params_for(&self, qi: &Mat) -> Vec<f64> {
        match &self.kind {
            BlockKind::Fixed { .. } => vec![],
            BlockKind::Scaled { q0 } => {
                let q0inv = linalg::inv_spd(q0).unwrap_or_else(|| linalg::pinv(q0, 1e-12));
                vec![(q0inv * qi).trace() / self.dim() as f64]
            }
            BlockKind::Full => {
                let l = linalg::cholesky(qi).unwrap_or_else(|| linalg::psd_sqrt(qi));
                linalg::vech(&l).as_slice().to_vec()
            }
        }
    }
}

/// One block covering all of `R^n`.
pub fn single_block(n: usize, kind: BlockKind) -> Vec<CovBlock> {
    vec![CovBlock { projector: linalg::eye(n), kind }]
}

pub fn default_theta_box() -> (f64, f64) {
    (-1e6, 1e6)
}

pub fn default_cov_bounds() -> (f64, f64) {
    (1e-10, 1e6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredModel {
    #[serde(default = "format_version")]
    pub version: u32,
    #[serde(with = "serde_mat::mat")]
    pub a0: Mat,
    #[serde(with = "serde_mat::mat")]
    pub b0: Mat,
    #[serde(with = "serde_mat::mat")]
    pub e: Mat,
    #[serde(with = "serde_mat::mat")]
    pub c: Mat,
    #[serde(with = "serde_mat::mat")]
    pub j: Mat,
    #[serde(with = "serde_mat::vector")]
    pub theta0: Vector,
    pub q_blocks: Vec<CovBlock>,
    pub r_blocks: Vec<CovBlock>,
    /// Box applied to every entry of ϑ and of the initial mean.
    #[serde(default = "default_theta_box")]
    pub theta_box: (f64, f64),
    /// Eigenvalue bounds applied to `Q`, `R` and `Σ_x0`.
    #[serde(default = "default_cov_bounds")]
    pub cov_eig_bounds: (f64, f64),
}

impl StructuredModel {
    /// Fully parameterized `x+ = A x + B u + w`, `y = C x + v` with `E = I`, free `[A, B]` and full `Q`, `R`.
    pub fn unstructured(c: Mat, nu: usize) -> Self {
        let (ny, nx) = c.shape();
        let nz = nx + nu;
        StructuredModel {
            version: FORMAT_VERSION,
            a0: Mat::zeros(nx, nx),
            b0: Mat::zeros(nx, nu),
            e: linalg::eye(nx),
            c,
            j: linalg::eye(nx * nz),
            theta0: Vector::zeros(nx * nz),
            q_blocks: single_block(nx, BlockKind::Full),
            r_blocks: single_block(ny, BlockKind::Full),
            theta_box: default_theta_box(),
            cov_eig_bounds: default_cov_bounds(),
        }
    }
}

fn format_version() -> u32 {
    FORMAT_VERSION
}

/// Free parameters: ϑ plus the covariance parameters η = (η_q, η_r, x̄0, Σ_x0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    #[serde(with = "serde_mat::vector")]
    pub theta: Vector,
    #[serde(with = "serde_mat::vector")]
    pub eta_q: Vector,
    #[serde(with = "serde_mat::vector")]
    pub eta_r: Vector,
    #[serde(with = "serde_mat::vector")]
    pub x0_mean: Vector,
    #[serde(with = "serde_mat::mat")]
    pub x0_cov: Mat,
}

impl StructuredModel {
    pub fn nx(&self) -> usize {
        self.a0.nrows()
    }
    pub fn nu(&self) -> usize {
        self.b0.ncols()
    }
    pub fn nw(&self) -> usize {
        self.e.ncols()
    }
    pub fn ny(&self) -> usize {
        self.c.nrows()
    }
    pub fn ntheta(&self) -> usize {
        self.j.ncols()
    }
    /// `n_x + n_u`.
    pub fn nz(&self) -> usize {
        self.nx() + self.nu()
    }

    pub fn e_pinv(&self) -> Mat {
        linalg::pinv(&self.e, 1e-9)
    }

    pub fn validate(&self) -> Result<()> {
        let (nx, nu, nw, ny) = (self.nx(), self.nu(), self.nw(), self.ny());
        if self.version != FORMAT_VERSION {
            return invalid(format!("unsupported model version {}", self.version));
        }
        if self.a0.ncols() != nx || self.b0.nrows() != nx || self.e.nrows() != nx || self.c.ncols() != nx {
            return invalid("A0, B0, E, C have inconsistent state dimensions");
        }
        if nx == 0 || ny == 0 || nw == 0 {
            return invalid("state, output and noise dimensions must be positive");
        }
        if self.j.nrows() != nw * (nx + nu) {
            return invalid(format!("J must have n_w(n_x+n_u) = {} rows, has {}", nw * (nx + nu), self.j.nrows()));
        }
        if self.theta0.len() != self.j.nrows() {
            return invalid("theta0 length must match the rows of J");
        }
        if linalg::rank(&self.e, 1e-9) != nw {
            return invalid("E must have full column rank");
        }
        let ab0 = hstack(&[&self.a0, &self.b0]);
        let leak = (self.e_pinv() * &ab0).abs().max();
        if leak > 1e-9 * (1.0 + ab0.abs().max()) {
            return invalid("[A0, B0] must have no component in the range of E; move it into theta0");
        }
        if !self.theta_box.0.is_finite() || !self.theta_box.1.is_finite() || self.theta_box.0 >= self.theta_box.1 {
            return invalid("theta_box must be a finite, non-empty interval");
        }
        let (lo, hi) = self.cov_eig_bounds;
        if !(lo > 0.0 && lo < hi) {
            return invalid("cov_eig_bounds must satisfy 0 < lower < upper");
        }
        validate_blocks(&self.q_blocks, nw, "Q", self.cov_eig_bounds)?;
        validate_blocks(&self.r_blocks, ny, "R", self.cov_eig_bounds)?;
        Ok(())
    }

    pub fn validate_params(&self, p: &ModelParams) -> Result<()> {
        if p.theta.len() != self.ntheta() {
            return invalid(format!("theta has length {}, model expects {}", p.theta.len(), self.ntheta()));
        }
        if p.eta_q.len() != num_block_params(&self.q_blocks) || p.eta_r.len() != num_block_params(&self.r_blocks) {
            return invalid("covariance parameter lengths do not match the block specs");
        }
        if p.x0_mean.len() != self.nx() || p.x0_cov.shape() != (self.nx(), self.nx()) {
            return invalid("initial state mean/covariance have wrong size");
        }
        if p.theta.iter().chain(p.eta_q.iter()).chain(p.eta_r.iter()).any(|v| !v.is_finite()) {
            return invalid("non-finite parameters");
        }
        Ok(())
    }

    /// `E†[A, B]` as a function of ϑ: `unvec(Jϑ + ϑ0)`.
    pub fn gamma(&self, theta: &Vector) -> Mat {
        linalg::unvec(&(&self.j * theta + &self.theta0), self.nw(), self.nz())
    }

    pub fn assemble_dynamics(&self, theta: &Vector) -> Result<(Mat, Mat)> {
        if theta.len() != self.ntheta() {
            return invalid("theta has wrong length");
        }
        let ab = hstack(&[&self.a0, &self.b0]) + &self.e * self.gamma(theta);
        let nx = self.nx();
        Ok((ab.columns(0, nx).into_owned(), ab.columns(nx, self.nu()).into_owned()))
    }

    /// Least-squares ϑ for given dynamics; exact when `[A, B]` lies in the model set.
    pub fn theta_from_dynamics(&self, a: &Mat, b: &Mat) -> Vector {
        let g = self.e_pinv() * hstack(&[a, b]);
        let rhs = linalg::vec(&g) - &self.theta0;
        linalg::pinv(&self.j, 1e-12) * rhs
    }

    /// `(Q, R)` without bound checks.
    pub fn covariances_unchecked(&self, p: &ModelParams) -> (Mat, Mat) {
        (assemble_blocks(&self.q_blocks, p.eta_q.as_slice(), self.nw()), assemble_blocks(&self.r_blocks, p.eta_r.as_slice(), self.ny()))
    }

    pub fn assemble_covariances(&self, p: &ModelParams) -> Result<(Mat, Mat)> {
        let (q, r) = self.covariances_unchecked(p);
        self.check_cov(&q, "Q")?;
        self.check_cov(&r, "R")?;
        Ok((q, r))
    }

    pub fn check_cov(&self, m: &Mat, name: &str) -> Result<()> {
        let (lo, hi) = self.cov_eig_bounds;
        let (a, b) = (linalg::min_eig(m), linalg::max_eig(m));
        let slack = 1e-9;
        if a < lo * (1.0 - slack) || b > hi * (1.0 + slack) || !a.is_finite() {
            return Err(Error::Validation(format!("{name} eigenvalues [{a:.3e}, {b:.3e}] outside bounds [{lo:.1e}, {hi:.1e}]")));
        }
        Ok(())
    }

    /// Parameters that reproduce given covariances (per-block compression of `Q` and `R`).
    pub fn params_from_covariances(&self, theta: Vector, q: &Mat, r: &Mat, x0_mean: Vector, x0_cov: Mat) -> ModelParams {
        let pack = |blocks: &[CovBlock], m: &Mat| {
            let v: Vec<f64> = blocks.iter().flat_map(|b| b.params_for(&(&b.projector * m * b.projector.transpose()))).collect();
            Vector::from_vec(v)
        };
        ModelParams { theta, eta_q: pack(&self.q_blocks, q), eta_r: pack(&self.r_blocks, r), x0_mean, x0_cov }
    }
}

pub fn num_block_params(blocks: &[CovBlock]) -> usize {
    blocks.iter().map(|b| b.num_params()).sum()
}

/// Offsets of each block's parameters in η.
pub fn block_offsets(blocks: &[CovBlock]) -> Vec<usize> {
    let mut off = Vec::with_capacity(blocks.len());
    let mut k = 0;
    for b in blocks {
        off.push(k);
        k += b.num_params();
    }
    off
}

pub fn assemble_blocks(blocks: &[CovBlock], eta: &[f64], n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    for b in blocks {
        let np = b.num_params();
        let qi = b.covariance(&eta[k..k + np]);
        m += b.projector.transpose() * qi * &b.projector;
        k += np;
    }
    linalg::sym(&m)
}

fn validate_blocks(blocks: &[CovBlock], n: usize, name: &str, bounds: (f64, f64)) -> Result<()> {
    if blocks.is_empty() {
        return invalid(format!("{name} needs at least one covariance block"));
    }
    for (i, b) in blocks.iter().enumerate() {
        if b.projector.ncols() != n || b.dim() == 0 {
            return invalid(format!("{name} block {i}: projector must be k x {n} with k > 0"));
        }
        match &b.kind {
            BlockKind::Fixed { q0 } | BlockKind::Scaled { q0 } => {
                if q0.shape() != (b.dim(), b.dim()) {
                    return invalid(format!("{name} block {i}: Q0 must be {0}x{0}", b.dim()));
                }
                if linalg::min_eig(q0) <= 0.0 {
                    return invalid(format!("{name} block {i}: Q0 must be positive definite"));
                }
                if matches!(b.kind, BlockKind::Fixed { .. }) {
                    let (lo, hi) = bounds;
                    if linalg::min_eig(q0) < lo || linalg::max_eig(q0) > hi {
                        return invalid(format!("{name} block {i}: fixed covariance violates eigenvalue bounds"));
                    }
                }
            }
            BlockKind::Full => {}
        }
    }
    let stacked = linalg::vstack(&blocks.iter().map(|b| &b.projector).collect::<Vec<_>>());
    if stacked.nrows() != n {
        return invalid(format!("{name} projectors must partition R^{n}"));
    }
    let err = (&stacked * stacked.transpose() - linalg::eye(n)).abs().max();
    if err > 1e-9 {
        return invalid(format!("{name} projectors must be disjoint orthonormal selectors"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn scalar_model() -> StructuredModel {
        // x+ = θ x + u + w, y = x + v
        StructuredModel {
            version: FORMAT_VERSION,
            a0: Mat::zeros(1, 1),
            b0: Mat::zeros(1, 1),
            e: Mat::identity(1, 1),
            c: Mat::identity(1, 1),
            j: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
            theta0: Vector::from_vec(vec![0.0, 1.0]),
            q_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            r_blocks: single_block(1, BlockKind::Scaled { q0: Mat::identity(1, 1) }),
            theta_box: default_theta_box(),
            cov_eig_bounds: default_cov_bounds(),
        }
    }

    #[test]
    fn scalar_assembly() {
        let m = scalar_model();
        m.validate().unwrap();
        let (a, b) = m.assemble_dynamics(&Vector::from_vec(vec![0.5])).unwrap();
        assert_eq!(a[(0, 0)], 0.5);
        assert_eq!(b[(0, 0)], 1.0);
    }

    #[test]
    fn roundtrip_through_pseudoinverse() {
        let m = crate::sim::chain_model(2, 0.1);
        m.validate().unwrap();
        let th = Vector::from_fn(m.ntheta(), |i, _| 0.3 + 0.1 * i as f64);
        let (a, b) = m.assemble_dynamics(&th).unwrap();
        let g = m.e_pinv() * hstack(&[&a, &b]);
        let lhs = linalg::vec(&g) - &m.theta0;
        assert!((lhs - &m.j * &th).abs().max() < 1e-12);
        assert!((m.theta_from_dynamics(&a, &b) - th).abs().max() < 1e-12);
    }

    #[test]
    fn overlapping_projectors_rejected() {
        let mut m = scalar_model();
        m.q_blocks.push(m.q_blocks[0].clone());
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn covariance_out_of_bounds_rejected() {
        let m = scalar_model();
        let p = ModelParams {
            theta: Vector::zeros(1),
            eta_q: Vector::from_vec(vec![1e-14]),
            eta_r: Vector::from_vec(vec![1.0]),
            x0_mean: Vector::zeros(1),
            x0_cov: Mat::identity(1, 1),
        };
        assert!(m.assemble_covariances(&p).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let m = crate::sim::chain_model(2, 0.1);
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"kind\":\"scaled\""));
        let back: StructuredModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
