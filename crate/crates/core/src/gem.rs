//! Generalized expectation maximization for structured models.
//!
//! Every iteration smooths the states under the current parameters and then increases the
//! conditional expected log-likelihood `𝒬` block by block. Covariance blocks whose rows are
//! coupled through common ϑ entries form one group; each group is updated in closed form
//! where possible and by L-BFGS otherwise, and a group update is only kept if it does not
//! decrease that group's share of `𝒬`.

use argmin::core::{CostFunction, Executor, Gradient};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use serde::{Deserialize, Serialize};

use crate::data::IoData;
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{block_offsets, BlockKind, CovBlock, ModelParams, StructuredModel};
use crate::smoother::{rts_smooth, SufficientStats};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StopRule {
    /// Stop once the log-likelihood gain is below this value.
    Absolute(f64),
    /// Stop once the gain is below this fraction of `|loglik|`.
    Relative(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GemConfig {
    pub stop: StopRule,
    pub max_iters: usize,
    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: u64,
}

impl Default for GemConfig {
    fn default() -> Self {
        Self { stop: StopRule::Relative(1e-6), max_iters: 500, lbfgs_memory: 10, lbfgs_max_iters: 200 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GmOptions {
    /// Use L-BFGS for every group, bypassing the closed-form routes.
    pub force_lbfgs: bool,
    pub lbfgs_memory: usize,
    pub lbfgs_max_iters: u64,
}

impl GmOptions {
    fn from_config(c: &GemConfig) -> Self {
        Self { force_lbfgs: false, lbfgs_memory: c.lbfgs_memory, lbfgs_max_iters: c.lbfgs_max_iters }
    }
}

#[derive(Clone, Debug)]
pub struct GemResult {
    pub params: ModelParams,
    /// Log-likelihood of the initial point followed by one entry per iteration.
    pub logliks: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `𝒬(θ, θ')` summed over the record, up to a θ-independent constant.
pub fn conditional_loglik(model: &StructuredModel, params: &ModelParams, stats: &SufficientStats) -> Result<f64> {
    let t = stats.t as f64;
    let (q, r) = model.covariances_unchecked(params);
    let gamma = model.gamma(&params.theta);
    let w = residual_w(stats, &gamma);
    let v = residual_v(model, stats);
    let lq = linalg::logdet_spd(&q).ok_or_else(|| Error::Numerical("Q not positive definite".into()))?;
    let lr = linalg::logdet_spd(&r).ok_or_else(|| Error::Numerical("R not positive definite".into()))?;
    let qi = linalg::inv_spd(&q).unwrap();
    let ri = linalg::inv_spd(&r).unwrap();
    let d0 = &stats.x0_mean - &params.x0_mean;
    let e0 = &stats.x0_cov + &d0 * d0.transpose();
    let s0 = linalg::sym(&params.x0_cov);
    let l0 = linalg::logdet_spd(&s0).ok_or_else(|| Error::Numerical("initial covariance not positive definite".into()))?;
    let s0i = linalg::inv_spd(&s0).unwrap();
    let inner = (s0i * e0).trace() + l0 + t * (lq + (qi * w).trace() + lr + (ri * v).trace());
    Ok(-0.5 * inner)
}

/// `∂𝒬/∂ϑ` at fixed covariances. The score of the log-likelihood when `θ = θ'`.
pub fn conditional_loglik_grad_theta(model: &StructuredModel, params: &ModelParams, stats: &SufficientStats) -> Result<Vector> {
    let (q, _) = model.covariances_unchecked(params);
    let qi = linalg::inv_spd(&q).ok_or_else(|| Error::Numerical("Q not positive definite".into()))?;
    let gamma = model.gamma(&params.theta);
    let g = qi * (&gamma * &stats.sigma_phi - &stats.psi_plus_phi);
    Ok(model.j.transpose() * linalg::vec(&g) * -(stats.t as f64))
}

/// `Φ+ − ΨΓᵀ − ΓΨᵀ + ΓΣφΓᵀ`.
pub fn residual_w(stats: &SufficientStats, gamma: &Mat) -> Mat {
    let pg = &stats.psi_plus_phi * gamma.transpose();
    linalg::sym(&(&stats.phi_plus - &pg - pg.transpose() + gamma * &stats.sigma_phi * gamma.transpose()))
}

/// `Φy − ΨxyCᵀ − CΨxyᵀ + CΣxCᵀ`.
pub fn residual_v(model: &StructuredModel, stats: &SufficientStats) -> Mat {
    let c = &model.c;
    let pc = &stats.psi_xy * c.transpose();
    linalg::sym(&(&stats.phi_y - &pc - pc.transpose() + c * &stats.sigma_x * c.transpose()))
}

fn excitation(stats: &SufficientStats) -> Result<Mat> {
    let s = &stats.sigma_phi;
    let lmin = linalg::min_eig(s);
    if lmin <= 1e-12 * linalg::max_eig(s).max(1e-300) {
        return Err(Error::InsufficientExcitation(format!("regressor second moment is singular (min eigenvalue {lmin:.3e})")));
    }
    Ok(linalg::inv_spd(s).unwrap())
}

/// Closed-form maximizer of `𝒬` when `[A, B]`, `Q` and `R` are fully parameterized.
pub fn m_step_closed_form(model: &StructuredModel, stats: &SufficientStats) -> Result<ModelParams> {
    let n = model.nw() * model.nz();
    let unstructured = model.j.shape() == (n, n)
        && linalg::rank(&model.j, 1e-12) == n
        && model.q_blocks.len() == 1
        && model.r_blocks.len() == 1
        && matches!(model.q_blocks[0].kind, BlockKind::Full)
        && matches!(model.r_blocks[0].kind, BlockKind::Full);
    if !unstructured {
        return invalid("closed-form M-step needs an invertible J and single full Q and R blocks");
    }
    let sinv = excitation(stats)?;
    let gamma = &stats.psi_plus_phi * &sinv;
    let theta = model.j.clone().lu().solve(&(linalg::vec(&gamma) - &model.theta0)).ok_or_else(|| Error::Numerical("J is singular".into()))?;
    let (lo, hi) = model.cov_eig_bounds;
    let q = linalg::clip_eigs(&(&stats.phi_plus - &gamma * stats.psi_plus_phi.transpose()), lo, hi);
    // C is known, so R is the output residual at that C
    let r = linalg::clip_eigs(&linalg::sym(&residual_v(model, stats)), lo, hi);
    let (x0m, x0c) = project_x0(model, stats);
    Ok(model.params_from_covariances(clamp_theta(model, theta), &q, &r, x0m, x0c))
}

fn clamp_theta(model: &StructuredModel, th: Vector) -> Vector {
    let (lo, hi) = model.theta_box;
    th.map(|v| v.clamp(lo, hi))
}

fn project_x0(model: &StructuredModel, stats: &SufficientStats) -> (Vector, Mat) {
    let (lo, hi) = model.cov_eig_bounds;
    let mean = clamp_theta(model, stats.x0_mean.clone());
    (mean, linalg::clip_eigs(&stats.x0_cov, lo, hi))
}

/// How a group of covariance blocks and its ϑ entries is updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    CovarianceOnly,
    LeastSquares,
    ScaledLeastSquares,
    Unstructured,
    Lbfgs,
}

#[derive(Clone, Debug)]
pub struct Group {
    pub blocks: Vec<usize>,
    pub theta_idx: Vec<usize>,
    pub route: Route,
}

/// Partition of the Q blocks into groups coupled through shared ϑ entries.
pub fn plan_groups(model: &StructuredModel) -> Vec<Group> {
    let nz = model.nz();
    let nb = model.q_blocks.len();
    // ϑ entries that touch each block's rows of Γ
    let support: Vec<Vec<usize>> = model
        .q_blocks
        .iter()
        .map(|b| {
            let sel = linalg::eye(nz).kronecker(&b.projector);
            let proj = sel * &model.j;
            (0..model.ntheta()).filter(|&k| proj.column(k).amax() > 0.0).collect()
        })
        .collect();
    let mut parent: Vec<usize> = (0..nb).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        p[i] = r;
        r
    }
    for a in 0..nb {
        for b in (a + 1)..nb {
            if support[a].iter().any(|k| support[b].contains(k)) {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut groups: Vec<Group> = Vec::new();
    let mut root_of: Vec<Option<usize>> = vec![None; nb];
    for i in 0..nb {
        let r = find(&mut parent, i);
        let gi = match root_of[r] {
            Some(g) => g,
            None => {
                groups.push(Group { blocks: vec![], theta_idx: vec![], route: Route::Lbfgs });
                root_of[r] = Some(groups.len() - 1);
                groups.len() - 1
            }
        };
        groups[gi].blocks.push(i);
        for &k in &support[i] {
            if !groups[gi].theta_idx.contains(&k) {
                groups[gi].theta_idx.push(k);
            }
        }
    }
    for g in &mut groups {
        g.theta_idx.sort_unstable();
        let blocks: Vec<&CovBlock> = g.blocks.iter().map(|&i| &model.q_blocks[i]).collect();
        g.route = if g.theta_idx.is_empty() {
            Route::CovarianceOnly
        } else if blocks.iter().all(|b| matches!(b.kind, BlockKind::Fixed { .. })) {
            Route::LeastSquares
        } else if blocks.len() == 1 {
            match blocks[0].kind {
                BlockKind::Scaled { .. } => Route::ScaledLeastSquares,
                BlockKind::Full if unstructured_block(model, blocks[0], &g.theta_idx) => Route::Unstructured,
                _ => Route::Lbfgs,
            }
        } else {
            Route::Lbfgs
        };
    }
    groups
}

/// True when the block's rows of Γ range over all matrices as its ϑ entries vary.
fn unstructured_block(model: &StructuredModel, b: &CovBlock, idx: &[usize]) -> bool {
    let sel = linalg::eye(model.nz()).kronecker(&b.projector);
    let jg = sel * select_cols(&model.j, idx);
    let need = b.dim() * model.nz();
    idx.len() == need && linalg::rank(&jg, 1e-10) == need
}

fn select_cols(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

struct GroupCtx<'a> {
    model: &'a StructuredModel,
    stats: &'a SufficientStats,
    group: &'a Group,
    offsets: Vec<usize>,
}

impl GroupCtx<'_> {
    fn blocks(&self) -> impl Iterator<Item = (usize, &CovBlock)> {
        self.group.blocks.iter().map(|&i| (i, &self.model.q_blocks[i]))
    }

    /// Group share of `-2𝒬/T`: `Σ logdet Q_i + tr(Q_i^{-1} Π_i W Π_iᵀ)`.
    fn objective(&self, theta: &Vector, eta_q: &Vector) -> f64 {
        let w = residual_w(self.stats, &self.model.gamma(theta));
        let mut f = 0.0;
        for (i, b) in self.blocks() {
            let np = b.num_params();
            let qi = b.covariance(&eta_q.as_slice()[self.offsets[i]..self.offsets[i] + np]);
            let wi = &b.projector * &w * b.projector.transpose();
            match (linalg::logdet_spd(&qi), linalg::inv_spd(&qi)) {
                (Some(ld), Some(inv)) => f += ld + (inv * wi).trace(),
                _ => return f64::INFINITY,
            }
        }
        f
    }

    /// Weighted least squares over the group's ϑ entries with weight `Ω = Σ Π_iᵀ Q_i^{-1} Π_i`.
    fn least_squares(&self, theta: &Vector, weights: &[Mat]) -> Result<Vector> {
        let nw = self.model.nw();
        let mut omega = Mat::zeros(nw, nw);
        for ((_, b), wi) in self.blocks().zip(weights) {
            omega += b.projector.transpose() * wi * &b.projector;
        }
        let h = self.stats.sigma_phi.kronecker(&omega);
        let bvec = linalg::vec(&(&omega * &self.stats.psi_plus_phi));
        let idx = &self.group.theta_idx;
        let jg = select_cols(&self.model.j, idx);
        let mut rest = theta.clone();
        for &k in idx {
            rest[k] = 0.0;
        }
        let r = &self.model.j * rest + &self.model.theta0;
        let lhs = jg.transpose() * &h * &jg;
        let rhs = jg.transpose() * (bvec - &h * r);
        let sol = lhs
            .clone()
            .cholesky()
            .map(|c| c.solve(&rhs))
            .ok_or_else(|| Error::InsufficientExcitation("normal equations of the ϑ update are singular".into()))?;
        let mut out = theta.clone();
        for (p, &k) in idx.iter().enumerate() {
            out[k] = sol[p];
        }
        Ok(clamp_theta(self.model, out))
    }

    fn block_residual(&self, theta: &Vector, b: &CovBlock) -> Mat {
        let w = residual_w(self.stats, &self.model.gamma(theta));
        linalg::sym(&(&b.projector * w * b.projector.transpose()))
    }
}

fn scaled_update(model: &StructuredModel, q0: &Mat, wi: &Mat) -> f64 {
    let (lo, hi) = model.cov_eig_bounds;
    let k = q0.nrows() as f64;
    let lam = (linalg::inv_spd(q0).unwrap() * wi).trace() / k;
    lam.clamp(lo / linalg::min_eig(q0), hi / linalg::max_eig(q0))
}

fn set_block(eta: &mut Vector, off: usize, vals: &[f64]) {
    for (k, v) in vals.iter().enumerate() {
        eta[off + k] = *v;
    }
}

/// Covariance blocks of a group at their closed-form optimum for fixed ϑ.
fn covariance_update(ctx: &GroupCtx, theta: &Vector, eta: &mut Vector) {
    let (lo, hi) = ctx.model.cov_eig_bounds;
    for (i, b) in ctx.blocks() {
        let wi = ctx.block_residual(theta, b);
        match &b.kind {
            BlockKind::Fixed { .. } => {}
            BlockKind::Scaled { q0 } => set_block(eta, ctx.offsets[i], &[scaled_update(ctx.model, q0, &wi)]),
            BlockKind::Full => {
                let qi = linalg::clip_eigs(&wi, lo, hi);
                set_block(eta, ctx.offsets[i], &b.params_for(&qi));
            }
        }
    }
}

fn current_weights(ctx: &GroupCtx, eta: &Vector) -> Vec<Mat> {
    ctx.blocks()
        .map(|(i, b)| {
            let qi = b.covariance(&eta.as_slice()[ctx.offsets[i]..ctx.offsets[i] + b.num_params()]);
            linalg::inv_spd(&qi).unwrap_or_else(|| linalg::pinv(&qi, 1e-12))
        })
        .collect()
}

/// L-BFGS objective over `[ϑ_G; covariance coordinates]`, where scaled blocks use `log λ` and
/// full blocks use Cholesky factors with log-diagonal.
struct GroupLbfgs<'a> {
    ctx: &'a GroupCtx<'a>,
    base_theta: Vector,
    base_eta: Vector,
}

impl GroupLbfgs<'_> {
    fn n_theta(&self) -> usize {
        self.ctx.group.theta_idx.len()
    }

    fn encode(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.ctx.group.theta_idx.iter().map(|&k| self.base_theta[k]).collect();
        for (i, b) in self.ctx.blocks() {
            let eta = &self.base_eta.as_slice()[self.ctx.offsets[i]..self.ctx.offsets[i] + b.num_params()];
            match b.kind {
                BlockKind::Fixed { .. } => {}
                BlockKind::Scaled { .. } => x.push(eta[0].max(1e-300).ln()),
                BlockKind::Full => {
                    let mut l = linalg::unvech_lower(eta, b.dim());
                    for d in 0..b.dim() {
                        // a valid factor has a positive diagonal; flip columns if needed
                        if l[(d, d)] < 0.0 {
                            let mut col = l.column_mut(d);
                            col.neg_mut();
                        }
                        l[(d, d)] = l[(d, d)].max(1e-150).ln();
                    }
                    x.extend(linalg::vech(&l).iter());
                }
            }
        }
        x
    }

    fn decode(&self, x: &[f64]) -> (Vector, Vector) {
        let mut theta = self.base_theta.clone();
        for (p, &k) in self.ctx.group.theta_idx.iter().enumerate() {
            theta[k] = x[p];
        }
        let mut eta = self.base_eta.clone();
        let mut pos = self.n_theta();
        for (i, b) in self.ctx.blocks() {
            match b.kind {
                BlockKind::Fixed { .. } => {}
                BlockKind::Scaled { .. } => {
                    eta[self.ctx.offsets[i]] = x[pos].exp();
                    pos += 1;
                }
                BlockKind::Full => {
                    let np = b.num_params();
                    let mut l = linalg::unvech_lower(&x[pos..pos + np], b.dim());
                    for d in 0..b.dim() {
                        l[(d, d)] = l[(d, d)].exp();
                    }
                    set_block(&mut eta, self.ctx.offsets[i], linalg::vech(&l).as_slice());
                    pos += np;
                }
            }
        }
        (theta, eta)
    }

    fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (theta, eta) = self.decode(x);
        let ctx = self.ctx;
        let gamma = ctx.model.gamma(&theta);
        let w = residual_w(ctx.stats, &gamma);
        let nw = ctx.model.nw();
        let mut f = 0.0;
        let mut omega = Mat::zeros(nw, nw);
        let mut grad = vec![0.0; x.len()];
        let mut pos = self.n_theta();
        for (i, b) in ctx.blocks() {
            let np = b.num_params();
            let qi = b.covariance(&eta.as_slice()[ctx.offsets[i]..ctx.offsets[i] + np]);
            let (ld, inv) = match (linalg::logdet_spd(&qi), linalg::inv_spd(&qi)) {
                (Some(a), Some(b)) => (a, b),
                _ => return (f64::INFINITY, grad),
            };
            let wi = &b.projector * &w * b.projector.transpose();
            f += ld + (&inv * &wi).trace();
            omega += b.projector.transpose() * &inv * &b.projector;
            match b.kind {
                BlockKind::Fixed { .. } => {}
                BlockKind::Scaled { .. } => {
                    let lam = eta[ctx.offsets[i]];
                    let q0inv = &inv * lam;
                    grad[pos] = b.dim() as f64 - (q0inv * &wi).trace() / lam;
                    pos += 1;
                }
                BlockKind::Full => {
                    let l = linalg::unvech_lower(&eta.as_slice()[ctx.offsets[i]..ctx.offsets[i] + np], b.dim());
                    let dl = (&inv * (&qi - &wi) * &inv * &l) * 2.0;
                    let mut k = 0;
                    for c in 0..b.dim() {
                        for r in c..b.dim() {
                            grad[pos + k] = if r == c { dl[(r, c)] * l[(r, c)] } else { dl[(r, c)] };
                            k += 1;
                        }
                    }
                    pos += np;
                }
            }
        }
        let dg = (&omega * (&gamma * &ctx.stats.sigma_phi - &ctx.stats.psi_plus_phi)) * 2.0;
        let dvec = linalg::vec(&dg);
        for (p, &k) in ctx.group.theta_idx.iter().enumerate() {
            grad[p] = ctx.model.j.column(k).dot(&dvec);
        }
        (f, grad)
    }
}

impl CostFunction for GroupLbfgs<'_> {
    type Param = Vec<f64>;
    type Output = f64;
    fn cost(&self, x: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value_and_grad(x).0)
    }
}

impl Gradient for GroupLbfgs<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;
    fn gradient(&self, x: &Vec<f64>) -> std::result::Result<Vec<f64>, argmin::core::Error> {
        Ok(self.value_and_grad(x).1)
    }
}

fn lbfgs_update(ctx: &GroupCtx, theta: &Vector, eta: &Vector, opts: &GmOptions) -> Option<(Vector, Vector)> {
    let prob = GroupLbfgs { ctx, base_theta: theta.clone(), base_eta: eta.clone() };
    let x0 = prob.encode();
    if x0.is_empty() {
        return None;
    }
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), opts.lbfgs_memory.max(1))
        .with_tolerance_grad(1e-12)
        .ok()?
        .with_tolerance_cost(1e-15)
        .ok()?;
    let res = Executor::new(prob, solver).configure(|s| s.param(x0).max_iters(opts.lbfgs_max_iters.max(1))).run();
    let res = res.ok()?;
    let best = res.state().best_param.clone()?;
    let prob = GroupLbfgs { ctx, base_theta: theta.clone(), base_eta: eta.clone() };
    Some(prob.decode(&best))
}

/// One generalized M-step: returns parameters whose `𝒬` is no smaller than that of `params`.
pub fn gm_step(model: &StructuredModel, params: &ModelParams, stats: &SufficientStats) -> Result<ModelParams> {
    gm_step_with(model, params, stats, &GmOptions::from_config(&GemConfig::default()))
}

pub fn gm_step_with(model: &StructuredModel, params: &ModelParams, stats: &SufficientStats, opts: &GmOptions) -> Result<ModelParams> {
    model.validate_params(params)?;
    excitation(stats)?;
    let (lo, hi) = model.cov_eig_bounds;
    let mut theta = params.theta.clone();
    let mut eta_q = params.eta_q.clone();
    let offsets = block_offsets(&model.q_blocks);
    for group in plan_groups(model) {
        let ctx = GroupCtx { model, stats, group: &group, offsets: offsets.clone() };
        let before = ctx.objective(&theta, &eta_q);
        let (mut th, mut eq) = (theta.clone(), eta_q.clone());
        let route = if opts.force_lbfgs { Route::Lbfgs } else { group.route };
        match route {
            Route::CovarianceOnly => covariance_update(&ctx, &th, &mut eq),
            Route::LeastSquares => th = ctx.least_squares(&th, &current_weights(&ctx, &eq))?,
            Route::ScaledLeastSquares => {
                let (_, b) = ctx.blocks().next().unwrap();
                let q0 = match &b.kind {
                    BlockKind::Scaled { q0 } => q0.clone(),
                    _ => unreachable!(),
                };
                th = ctx.least_squares(&th, &[linalg::inv_spd(&q0).unwrap()])?;
                covariance_update(&ctx, &th, &mut eq);
            }
            Route::Unstructured => {
                th = ctx.least_squares(&th, &current_weights(&ctx, &eq))?;
                covariance_update(&ctx, &th, &mut eq);
            }
            Route::Lbfgs => {
                if let Some((t2, e2)) = lbfgs_update(&ctx, &th, &eq, opts) {
                    th = clamp_theta(model, t2);
                    eq = e2;
                    // project full blocks onto the eigenvalue bounds
                    for (i, b) in ctx.blocks() {
                        let np = b.num_params();
                        let qi = b.covariance(&eq.as_slice()[offsets[i]..offsets[i] + np]);
                        let qc = match &b.kind {
                            BlockKind::Fixed { .. } => continue,
                            BlockKind::Scaled { q0 } => {
                                let lam = eq[offsets[i]].clamp(lo / linalg::min_eig(q0), hi / linalg::max_eig(q0));
                                q0 * lam
                            }
                            BlockKind::Full => linalg::clip_eigs(&qi, lo, hi),
                        };
                        set_block(&mut eq, offsets[i], &b.params_for(&qc));
                    }
                }
            }
        }
        let after = ctx.objective(&th, &eq);
        if after <= before {
            theta = th;
            eta_q = eq;
        }
    }
    // R blocks do not depend on ϑ
    let v = residual_v(model, stats);
    let mut eta_r = params.eta_r.clone();
    for (b, off) in model.r_blocks.iter().zip(block_offsets(&model.r_blocks)) {
        let vi = linalg::sym(&(&b.projector * &v * b.projector.transpose()));
        match &b.kind {
            BlockKind::Fixed { .. } => {}
            BlockKind::Scaled { q0 } => set_block(&mut eta_r, off, &[scaled_update(model, q0, &vi)]),
            BlockKind::Full => set_block(&mut eta_r, off, &b.params_for(&linalg::clip_eigs(&vi, lo, hi))),
        }
    }
    let (x0_mean, x0_cov) = project_x0(model, stats);
    Ok(ModelParams { theta, eta_q, eta_r, x0_mean, x0_cov })
}

/// Starting point: ϑ = 0 and every free covariance at the average output variance.
pub fn default_init(model: &StructuredModel, data: &IoData) -> ModelParams {
    let ny = model.ny();
    let t = data.len().max(1) as f64;
    let mean = data.y.iter().fold(Vector::zeros(ny), |a, y| a + y) / t;
    let var = data.y.iter().map(|y| (y - &mean).norm_squared()).sum::<f64>() / (t * ny as f64);
    let (lo, hi) = model.cov_eig_bounds;
    let s = var.clamp(lo * 10.0, hi / 10.0);
    let init_blocks = |blocks: &[CovBlock], n: usize| {
        let m = linalg::eye(n) * s;
        let v: Vec<f64> = blocks
            .iter()
            .flat_map(|b| match &b.kind {
                BlockKind::Scaled { q0 } => vec![s / linalg::max_eig(q0)],
                _ => b.params_for(&(&b.projector * &m * b.projector.transpose())),
            })
            .collect();
        Vector::from_vec(v)
    };
    ModelParams {
        theta: Vector::zeros(model.ntheta()),
        eta_q: init_blocks(&model.q_blocks, model.nw()),
        eta_r: init_blocks(&model.r_blocks, model.ny()),
        x0_mean: Vector::zeros(model.nx()),
        x0_cov: linalg::eye(model.nx()) * s,
    }
}

pub fn run_gem(model: &StructuredModel, data: &IoData, init: Option<ModelParams>, config: &GemConfig) -> Result<GemResult> {
    model.validate()?;
    data.validate(model.nu(), model.ny())?;
    if model.nu() > 0 {
        let suu = data.u.iter().fold(Mat::zeros(model.nu(), model.nu()), |s, u| s + u * u.transpose());
        if linalg::min_eig(&suu) <= 1e-12 * linalg::max_eig(&suu).max(1e-300) {
            eprintln!("warning: inputs are not persistently exciting; the estimate may not be unique");
        }
    }
    let mut params = init.unwrap_or_else(|| default_init(model, data));
    model.validate_params(&params)?;
    let opts = GmOptions::from_config(config);
    let mut logliks = Vec::new();
    let mut best = params.clone();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let sm = rts_smooth(model, &params, data)?;
        let ll = sm.loglik;
        if !ll.is_finite() {
            return Err(Error::Numerical("log-likelihood became non-finite".into()));
        }
        if let Some(&prev) = logliks.last() {
            iterations += 1;
            if ll >= prev {
                best = params.clone();
            }
            let eps = match config.stop {
                StopRule::Absolute(e) => e,
                StopRule::Relative(r) => r * prev.abs(),
            };
            logliks.push(ll);
            if ll - prev < eps {
                converged = true;
                break;
            }
        } else {
            logliks.push(ll);
            best = params.clone();
        }
        if iterations >= config.max_iters {
            break;
        }
        params = gm_step_with(model, &params, &sm.stats, &opts)?;
    }
    Ok(GemResult { params: best, logliks, iterations, converged })
}
