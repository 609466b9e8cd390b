//! End-to-end helpers shared by the examples, the command line and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::data::IoData;
use crate::error::{invalid, Result};
use crate::gem::{run_gem, GemConfig};
use crate::lfr::PerformanceSpec;
use crate::linalg::{self, Mat, Vector};
use crate::mpcdesign::{design_mpc, ConstraintSpec, DesignConfig, DesignInputs, MpcDesign};
use crate::synth::{dk_iterate, RobustController, SynthConfig, SynthProblem};
use crate::model::{ModelParams, StructuredModel, FORMAT_VERSION};
use crate::mpconline::{self, OcpStatus, TubeMode};
use crate::sim::{self, Aggregate, InputPlan, RolloutMetrics, Scenario, TruthSystem};
use crate::uq::{self, UncertaintyEllipsoid};

/// Input amplitude used for the identification experiments.
pub const EXCITATION_STD: f64 = 2.0;
/// Weight on the input channel of the performance output.
pub const INPUT_WEIGHT: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Identified {
    pub version: u32,
    pub model: StructuredModel,
    pub params: ModelParams,
    pub ellipsoid: UncertaintyEllipsoid,
    pub gem_iterations: usize,
}

impl Identified {
    pub fn covariances(&self) -> Result<(Mat, Mat)> {
        self.model.assemble_covariances(&self.params)
    }

    pub fn performance(&self) -> PerformanceSpec {
        PerformanceSpec::output_and_input(&self.model.c, self.model.nu(), INPUT_WEIGHT)
    }
}

pub fn identify(model: &StructuredModel, data: &IoData, delta: f64) -> Result<Identified> {
    let fit = run_gem(model, data, None, &GemConfig::default())?;
    let info = uq::observed_information(model, &fit.params, data)?;
    let ellipsoid = uq::confidence_ellipsoid(&fit.params.theta, &info, delta)?;
    Ok(Identified { version: FORMAT_VERSION, model: model.clone(), params: fit.params, ellipsoid, gem_iterations: fit.iterations })
}

/// Random `n`-mass chain identified from `t_len` open-loop samples.
pub fn chain_study(n: usize, seed: u64, t_len: usize, delta: f64) -> Result<(TruthSystem, Identified)> {
    let truth = sim::build_msd_chain(n, seed);
    let data = sim::generate_data(&truth, t_len, EXCITATION_STD, seed.wrapping_add(1))?;
    let id = identify(&truth.model, &data, delta)?;
    Ok((truth, id))
}

pub const VELOCITY_BOUND: f64 = 0.3;
pub const INPUT_BOUND: f64 = 3.5;
pub const CHANCE_LEVEL: f64 = 0.95;
pub const INITIAL_POSITION: f64 = -0.5;
pub const INITIAL_COV: f64 = 1e-6;

/// Every mass displaced to `INITIAL_POSITION` at rest.
pub fn chain_initial_state(n: usize) -> (Vector, Mat) {
    let mean = Vector::from_fn(2 * n, |i, _| if i < n { INITIAL_POSITION } else { 0.0 });
    (mean, linalg::eye(2 * n) * INITIAL_COV)
}

/// Identified chain with its robust controller and the constrained control scenario.
#[derive(Clone, Debug)]
pub struct CaseStudy {
    pub truth: TruthSystem,
    pub id: Identified,
    pub robust: RobustController,
    pub constraints: ConstraintSpec,
    pub x0_mean: Vector,
    pub x0_cov: Mat,
}

pub fn case_study(n: usize, seed: u64, t_len: usize, delta: f64) -> Result<CaseStudy> {
    let (truth, id) = chain_study(n, seed, t_len, delta)?;
    let (q, r) = id.covariances()?;
    let perf = id.performance();
    let prob = SynthProblem { model: &id.model, ell: &id.ellipsoid, q: &q, r: &r, perf: &perf };
    let robust = dk_iterate(&prob, &SynthConfig::default())?;
    let constraints = ConstraintSpec::chain(n, VELOCITY_BOUND, INPUT_BOUND, CHANCE_LEVEL)?;
    let (x0_mean, x0_cov) = chain_initial_state(n);
    Ok(CaseStudy { truth, id, robust, constraints, x0_mean, x0_cov })
}

impl CaseStudy {
    pub fn design(&self, cfg: &DesignConfig) -> Result<MpcDesign> {
        let (q, r) = self.id.covariances()?;
        let perf = self.id.performance();
        let inp = DesignInputs {
            model: &self.id.model,
            ell: &self.id.ellipsoid,
            controller: &self.robust.controller,
            q: &q,
            r: &r,
            perf: &perf,
            constraints: &self.constraints,
            x0_mean: &self.x0_mean,
            x0_cov: &self.x0_cov,
        };
        design_mpc(&inp, cfg)
    }
}

impl CaseStudy {
    pub fn scenario(&self, runs: usize, steps: usize, seed: u64) -> Scenario {
        Scenario {
            version: FORMAT_VERSION,
            truth: self.truth.clone(),
            constraints: self.constraints.clone(),
            x0_mean: self.x0_mean.clone(),
            x0_cov: self.x0_cov.clone(),
            runs,
            steps,
            seed,
        }
    }
}

/// Closed-loop Monte Carlo of one policy.
#[derive(Debug)]
pub struct PolicyRun {
    pub name: String,
    pub aggregate: Aggregate,
    pub runs: Vec<Result<RolloutMetrics>>,
    pub fallbacks: usize,
}

/// Robust controller alone (`ν ≡ 0`).
/// The design's guarantees hold only for the initial distribution it was built for.
fn check_initial_state(design: &MpcDesign, sc: &Scenario) -> Result<()> {
    let nx = sc.x0_mean.len();
    if design.mu_xi0.len() != 2 * nx || sc.x0_cov.shape() != (nx, nx) {
        return invalid("design and scenario have different state dimensions");
    }
    let dm = (design.mu_xi0.rows(0, nx) - &sc.x0_mean).amax();
    if dm > 1e-9 * sc.x0_mean.amax().max(1.0) {
        return invalid(format!("design was made for another initial mean (differs by {dm:.3e}); set x0_mean in the design config"));
    }
    let gap = linalg::min_eig(&linalg::sym(&(design.sigma_bar[0].view((0, 0), (nx, nx)) - &sc.x0_cov)));
    if gap < -1e-9 * sc.x0_cov.amax().max(1e-12) {
        return invalid(format!("design covariance bound does not cover the initial covariance (eigenvalue {gap:.3e}); set x0_cov in the design config"));
    }
    Ok(())
}

pub fn run_robust(cs: &CaseStudy, sc: &Scenario) -> PolicyRun {
    let perf = cs.id.performance();
    let (aggregate, runs) = sim::monte_carlo(sc, &cs.robust.controller, None, &perf.q_c(), &perf.r_c());
    PolicyRun { name: "robust".into(), aggregate, runs, fallbacks: 0 }
}

/// Tube MPC from `design` in the given mode.
pub fn run_mpc(design: &MpcDesign, mode: TubeMode, sc: &Scenario, name: &str) -> Result<PolicyRun> {
    check_initial_state(design, sc)?;
    let (nu, sols, fallbacks) = mpconline::plan(design, mode, sc.steps)?;
    let plan = InputPlan {
        nu,
        solve_times: sols.iter().map(|s| s.solve_time).collect(),
        feasible: sols.iter().map(|s| s.status == OcpStatus::Optimal).collect(),
    };
    let q_c = design.q_xi.view((0, 0), (sc.x0_mean.len(), sc.x0_mean.len())).into_owned();
    let (aggregate, runs) = sim::monte_carlo(sc, &design.controller, Some(&plan), &q_c, &design.r_c);
    Ok(PolicyRun { name: name.into(), aggregate, runs, fallbacks })
}
