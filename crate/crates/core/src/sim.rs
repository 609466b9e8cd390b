//! Mass-spring-damper chains and closed-loop Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::IoData;
use crate::error::Result;
use crate::lfr::Controller;
use crate::linalg::{self, Mat, Vector};
use crate::mpcdesign::ConstraintSpec;
use crate::model::{self, BlockKind, ModelParams, StructuredModel, FORMAT_VERSION};

/// Physical parameters of a chain attached to a wall at its first mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainPhysics {
    pub masses: Vec<f64>,
    /// `springs[i]` connects mass `i` to mass `i-1` (the wall for `i = 0`).
    pub springs: Vec<f64>,
    pub dampers: Vec<f64>,
    pub dt: f64,
}

/// A data-generating system: structured model plus its true parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSystem {
    pub version: u32,
    pub model: StructuredModel,
    pub params: ModelParams,
    pub physics: Option<ChainPhysics>,
}

/// Per-mass parameter layout: `[k_i/m_i, k_{i+1}/m_i, c_i/m_i, c_{i+1}/m_i, 1/m_i]`, with the
/// right-neighbour terms absent for the last mass. That gives `5n - 2` parameters.
pub fn chain_param_names(n: usize) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..n {
        names.push(format!("k{i}/m{i}"));
        if i + 1 < n {
            names.push(format!("k{}/m{i}", i + 1));
        }
        names.push(format!("c{i}/m{i}"));
        if i + 1 < n {
            names.push(format!("c{}/m{i}", i + 1));
        }
        names.push(format!("1/m{i}"));
    }
    names
}

/// Structured model of an `n`-mass chain under forward-Euler discretization.
///
/// State `[p_1..p_n, v_1..v_n]`, one force input per mass, position measurements and
/// velocity noise. Kinematics are known; every acceleration coefficient is unknown.
pub fn chain_model(n: usize, dt: f64) -> StructuredModel {
    let nx = 2 * n;
    let (nu, nw, ny) = (n, n, n);
    let nz = nx + nu;
    let mut a0 = Mat::zeros(nx, nx);
    for i in 0..n {
        a0[(i, i)] = 1.0;
        a0[(i, n + i)] = dt;
    }
    let mut e = Mat::zeros(nx, nw);
    for i in 0..n {
        e[(n + i, i)] = 1.0;
    }
    let mut c = Mat::zeros(ny, nx);
    for i in 0..n {
        c[(i, i)] = 1.0;
    }
    // vec index of Γ[row, col] with Γ = E†[A, B] of size n_w x n_z
    let idx = |row: usize, col: usize| col * nw + row;
    let mut theta0 = Vector::zeros(nw * nz);
    for i in 0..n {
        theta0[idx(i, n + i)] = 1.0;
    }
    let mut cols: Vec<Vector> = Vec::new();
    let mut push = |entries: &[(usize, f64)]| {
        let mut v = Vector::zeros(nw * nz);
        for &(k, val) in entries {
            v[k] += val;
        }
        cols.push(v);
    };
    for i in 0..n {
        let (p, v) = (|j: usize| j, |j: usize| n + j);
        // spring to the left (wall when i == 0)
        let mut ent = vec![(idx(i, p(i)), -dt)];
        if i > 0 {
            ent.push((idx(i, p(i - 1)), dt));
        }
        push(&ent);
        if i + 1 < n {
            push(&[(idx(i, p(i)), -dt), (idx(i, p(i + 1)), dt)]);
        }
        let mut ent = vec![(idx(i, v(i)), -dt)];
        if i > 0 {
            ent.push((idx(i, v(i - 1)), dt));
        }
        push(&ent);
        if i + 1 < n {
            push(&[(idx(i, v(i)), -dt), (idx(i, v(i + 1)), dt)]);
        }
        push(&[(idx(i, nx + i), dt)]);
    }
    let mut j = Mat::zeros(nw * nz, cols.len());
    for (k, col) in cols.iter().enumerate() {
        j.set_column(k, col);
    }
    StructuredModel {
        version: FORMAT_VERSION,
        a0,
        b0: Mat::zeros(nx, nu),
        e,
        c,
        j,
        theta0,
        q_blocks: model::single_block(nw, BlockKind::Scaled { q0: linalg::eye(nw) }),
        r_blocks: model::single_block(ny, BlockKind::Scaled { q0: linalg::eye(ny) }),
        theta_box: model::default_theta_box(),
        cov_eig_bounds: model::default_cov_bounds(),
    }
}

pub fn chain_theta(ph: &ChainPhysics) -> Vector {
    let n = ph.masses.len();
    let mut th = Vec::with_capacity(5 * n - 2);
    for i in 0..n {
        let m = ph.masses[i];
        th.push(ph.springs[i] / m);
        if i + 1 < n {
            th.push(ph.springs[i + 1] / m);
        }
        th.push(ph.dampers[i] / m);
        if i + 1 < n {
            th.push(ph.dampers[i + 1] / m);
        }
        th.push(1.0 / m);
    }
    Vector::from_vec(th)
}

pub const CHAIN_DT: f64 = 0.1;
pub const CHAIN_NOISE: f64 = 3e-4;

/// Random chain: masses in [0.9, 1.1], springs in [1.8, 2.2], dampers in [0.9, 1.1];
/// `Q = R = 3e-4 I`.
pub fn build_msd_chain(n: usize, seed: u64) -> TruthSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masses = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
    let springs = (0..n).map(|_| rng.gen_range(1.8..2.2)).collect();
    let dampers = (0..n).map(|_| rng.gen_range(0.9..1.1)).collect();
    let physics = ChainPhysics { masses, springs, dampers, dt: CHAIN_DT };
    let model = chain_model(n, CHAIN_DT);
    let params = ModelParams {
        theta: chain_theta(&physics),
        eta_q: Vector::from_element(1, CHAIN_NOISE),
        eta_r: Vector::from_element(1, CHAIN_NOISE),
        x0_mean: Vector::zeros(2 * n),
        x0_cov: linalg::eye(2 * n) * 1e-6,
    };
    TruthSystem { version: FORMAT_VERSION, model, params, physics: Some(physics) }
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vector {
    Vector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

/// Sample from `N(mean, cov)` using a symmetric square root (tolerates singular `cov`).
pub fn sample_gaussian<R: Rng>(rng: &mut R, mean: &Vector, cov_half: &Mat) -> Vector {
    mean + cov_half * gaussian_vec(rng, cov_half.ncols())
}

/// Open-loop data with i.i.d. Gaussian inputs of standard deviation `u_std`.
pub fn generate_data(truth: &TruthSystem, t_len: usize, u_std: f64, seed: u64) -> Result<IoData> {
    let m = &truth.model;
    let (a, b) = m.assemble_dynamics(&truth.params.theta)?;
    let (q, r) = m.assemble_covariances(&truth.params)?;
    let (qh, rh) = (linalg::psd_sqrt(&q), linalg::psd_sqrt(&r));
    let x0h = linalg::psd_sqrt(&truth.params.x0_cov);
    let mut rng = rng_for(seed, 0);
    let mut x = sample_gaussian(&mut rng, &truth.params.x0_mean, &x0h);
    let mut data = IoData { u: Vec::with_capacity(t_len), y: Vec::with_capacity(t_len) };
    for _ in 0..t_len {
        let u = gaussian_vec(&mut rng, m.nu()) * u_std;
        let w = &qh * gaussian_vec(&mut rng, m.nw());
        x = &a * &x + &b * &u + &m.e * w;
        let y = &m.c * &x + &rh * gaussian_vec(&mut rng, m.ny());
        data.u.push(u);
        data.y.push(y);
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        assert_eq!(chain_model(5, 0.1).ntheta(), 23);
        assert_eq!(chain_model(2, 0.1).ntheta(), 8);
        assert_eq!(chain_param_names(2).len(), 8);
    }

    #[test]
    fn chain_matches_newtonian_euler_step() {
        let truth = build_msd_chain(3, 7);
        let ph = truth.physics.as_ref().unwrap();
        let (a, b) = truth.model.assemble_dynamics(&truth.params.theta).unwrap();
        let n = 3;
        let (x, u) = (Vector::from_fn(2 * n, |i, _| (i as f64 * 0.37).sin()), Vector::from_vec(vec![0.2, -0.4, 1.0]));
        let next = &a * &x + &b * &u;
        for i in 0..n {
            let p = |j: isize| if j < 0 || j as usize >= n { 0.0 } else { x[j as usize] };
            let v = |j: isize| if j < 0 || j as usize >= n { 0.0 } else { x[n + j as usize] };
            let ii = i as isize;
            let mut f = -ph.springs[i] * (p(ii) - p(ii - 1)) - ph.dampers[i] * (v(ii) - v(ii - 1)) + u[i];
            if i + 1 < n {
                f += ph.springs[i + 1] * (p(ii + 1) - p(ii)) + ph.dampers[i + 1] * (v(ii + 1) - v(ii));
            }
            assert!((next[n + i] - (v(ii) + ph.dt * f / ph.masses[i])).abs() < 1e-14);
            assert!((next[i] - (p(ii) + ph.dt * v(ii))).abs() < 1e-14);
        }
    }

    #[test]
    fn discretized_chain_is_stable() {
        for seed in 0..5 {
            let t = build_msd_chain(2, seed);
            let (a, _) = t.model.assemble_dynamics(&t.params.theta).unwrap();
            assert!(linalg::spectral_radius(&a) < 1.0);
        }
    }
}

/// Closed-loop evaluation scenario against the true system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub truth: TruthSystem,
    pub constraints: ConstraintSpec,
    #[serde(with = "crate::serde_mat::vector")]
    pub x0_mean: Vector,
    #[serde(with = "crate::serde_mat::mat")]
    pub x0_cov: Mat,
    pub runs: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub version: u32,
    /// `‖x_t‖²_{Q_c} + ‖u_t‖²_{R_c}` per step.
    pub stage_cost: Vec<f64>,
    /// `violations[t][j]`: constraint `j` violated at step `t`.
    pub violations: Vec<Vec<bool>>,
    pub solve_times: Vec<f64>,
    pub feasible: Vec<bool>,
}

impl RolloutMetrics {
    pub fn total_cost(&self) -> f64 {
        self.stage_cost.iter().sum()
    }

    pub fn any_violation(&self) -> bool {
        self.violations.iter().flatten().any(|&v| v)
    }
}

/// Nominal corrections to add to the controller input, with the solver statistics that
/// produced them.
#[derive(Clone, Debug, Default)]
pub struct InputPlan {
    pub nu: Vec<Vector>,
    pub solve_times: Vec<f64>,
    pub feasible: Vec<bool>,
}

/// One rollout of `x_{t+1} = A x + B u + E w`, `y = C x + v` under `u = K x_c + ν_t`,
/// `x_c⁺ = A_c x_c + L y`, starting from `x_c = μ_x0`.
pub fn rollout(sc: &Scenario, ctrl: &Controller, plan: Option<&InputPlan>, q_c: &Mat, r_c: &Mat, run: u64) -> Result<RolloutMetrics> {
    let m = &sc.truth.model;
    let (a, b) = m.assemble_dynamics(&sc.truth.params.theta)?;
    let (q, r) = m.assemble_covariances(&sc.truth.params)?;
    let (qh, rh) = (linalg::psd_sqrt(&q), linalg::psd_sqrt(&r));
    let mut rng = rng_for(sc.seed, run + 1);
    let mut x = sample_gaussian(&mut rng, &sc.x0_mean, &linalg::psd_sqrt(&sc.x0_cov));
    let mut xc = sc.x0_mean.clone();
    let mut out = RolloutMetrics { version: FORMAT_VERSION, stage_cost: Vec::new(), violations: Vec::new(), solve_times: Vec::new(), feasible: Vec::new() };
    for t in 0..sc.steps {
        let mut u = &ctrl.k * &xc;
        if let Some(p) = plan {
            let nu = p.nu.get(t).ok_or_else(|| crate::error::Error::Validation("input plan shorter than the rollout".into()))?;
            u += nu;
            out.solve_times.push(p.solve_times[t]);
            out.feasible.push(p.feasible[t]);
        }
        let z = Vector::from_iterator(x.len() + u.len(), x.iter().chain(u.iter()).copied());
        out.violations.push(sc.constraints.h.iter().map(|h| h.dot(&z) > 1.0).collect());
        out.stage_cost.push(x.dot(&(q_c * &x)) + u.dot(&(r_c * &u)));
        let y = &m.c * &x + &rh * gaussian_vec(&mut rng, m.ny());
        xc = &ctrl.a_c * &xc + &ctrl.l * y;
        x = &a * &x + &b * &u + &m.e * (&qh * gaussian_vec(&mut rng, m.nw()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub version: u32,
    pub runs: usize,
    pub aborted: usize,
    pub mean_cost: f64,
    pub cost_std_err: f64,
    /// `violation_freq[t][j]`: fraction of runs violating constraint `j` at step `t`.
    pub violation_freq: Vec<Vec<f64>>,
    pub max_violation: f64,
    /// Fraction of runs with at least one violation.
    pub runs_violating: f64,
    pub mean_solve_time: f64,
    pub infeasible_solves: usize,
}

/// Mean and standard error with compensated summation.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let kahan = |it: &mut dyn Iterator<Item = f64>| {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for v in it {
            let y = v - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        s
    };
    let mean = kahan(&mut xs.iter().copied()) / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = kahan(&mut xs.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn aggregate(runs: &[Result<RolloutMetrics>]) -> Aggregate {
    let ok: Vec<&RolloutMetrics> = runs.iter().filter_map(|r| r.as_ref().ok()).collect();
    let costs: Vec<f64> = ok.iter().map(|r| r.total_cost()).collect();
    let (mean_cost, cost_std_err) = mean_and_se(&costs);
    let steps = ok.first().map_or(0, |r| r.violations.len());
    let ncons = ok.first().and_then(|r| r.violations.first()).map_or(0, |v| v.len());
    let nr = ok.len().max(1) as f64;
    let violation_freq: Vec<Vec<f64>> = (0..steps).map(|t| (0..ncons).map(|j| ok.iter().filter(|r| r.violations[t][j]).count() as f64 / nr).collect()).collect();
    let max_violation = violation_freq.iter().flatten().copied().fold(0.0, f64::max);
    let times: Vec<f64> = ok.iter().flat_map(|r| r.solve_times.iter().copied()).collect();
    Aggregate {
        version: FORMAT_VERSION,
        runs: runs.len(),
        aborted: runs.len() - ok.len(),
        mean_cost,
        cost_std_err,
        violation_freq,
        max_violation,
        runs_violating: ok.iter().filter(|r| r.any_violation()).count() as f64 / nr,
        mean_solve_time: if times.is_empty() { 0.0 } else { times.iter().sum::<f64>() / times.len() as f64 },
        infeasible_solves: ok.first().map_or(0, |r| r.feasible.iter().filter(|f| !**f).count()),
    }
}

/// Independent rollouts in parallel; run `i` uses its own random stream.
pub fn monte_carlo(sc: &Scenario, ctrl: &Controller, plan: Option<&InputPlan>, q_c: &Mat, r_c: &Mat) -> (Aggregate, Vec<Result<RolloutMetrics>>) {
    use rayon::prelude::*;
    let runs: Vec<Result<RolloutMetrics>> = (0..sc.runs as u64).into_par_iter().map(|i| rollout(sc, ctrl, plan, q_c, r_c, i)).collect();
    (aggregate(&runs), runs)
}

/// Mean and standard error of the per-run cost difference `a - b` (same seeds).
pub fn paired_difference(a: &[Result<RolloutMetrics>], b: &[Result<RolloutMetrics>]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).filter_map(|(x, y)| Some(x.as_ref().ok()?.total_cost() - y.as_ref().ok()?.total_cost())).collect();
    mean_and_se(&d)
}
