//! Command-line pipeline: every stage reads and writes versioned JSON or CSV artifacts, so the
//! stages can be run one at a time or chained by `demo-msd`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::IoData;
use crate::error::{invalid, Error, Result};
use crate::gem::{run_gem, GemConfig};
use crate::lfr::{Controller, PerformanceSpec};
use crate::linalg::{self, Mat, Vector};
use crate::model::{ModelParams, StructuredModel, FORMAT_VERSION};
use crate::mpcdesign::{design_mpc, ConstraintSpec, DesignConfig, DesignInputs, MpcDesign};
use crate::mpconline::{MpcController, MpcState, TubeMode};
use crate::sim::{self, rng_for, Aggregate, RolloutMetrics, Scenario, TruthSystem};
use crate::study::{self, run_mpc, PolicyRun};
use crate::synth::{dk_iterate, RobustController, SynthConfig, SynthProblem};
use crate::uq::{self, UncertaintyEllipsoid};

#[derive(Parser, Debug)]
#[command(name = "datapc", version, about = "Identify, quantify, synthesize and run tube MPC from input-output data")]
pub struct Cli {
    /// Pipeline configuration (JSON); command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Probability level of the parameter confidence set.
    #[arg(long, global = true)]
    pub delta: Option<f64>,
    /// Tube dynamics of the online problem.
    #[arg(long, global = true)]
    pub mode: Option<TubeMode>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Report failures as a JSON object on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Maximum-likelihood estimate of a structured model from data.
    Identify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Confidence ellipsoid around an estimate.
    Uq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        theta: PathBuf,
    },
    /// Robust H2 output-feedback controller for the ellipsoid.
    Synth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        ellipsoid: PathBuf,
    },
    /// Offline tube MPC design.
    Design {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        ellipsoid: PathBuf,
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        constraints: PathBuf,
        /// Ignore the parameter uncertainty (certainty-equivalent design).
        #[arg(long)]
        nominal: bool,
    },
    /// One closed-loop run of the MPC against a plant, logged per step.
    Run {
        #[arg(long)]
        design: PathBuf,
        /// True system (JSON).
        #[arg(long)]
        plant: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Monte Carlo evaluation of an MPC design or of the controller alone.
    Eval {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, conflicts_with = "controller")]
        design: Option<PathBuf>,
        #[arg(long)]
        controller: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Whole pipeline on a random mass-spring-damper chain.
    DemoMsd {
        #[arg(long, default_value_t = 2)]
        masses: usize,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Length of the identification experiment.
        #[arg(long)]
        samples: Option<usize>,
    },
}

/// Settings shared by the subcommands; every field is optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: Option<u32>,
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub mode: Option<TubeMode>,
    pub gem: Option<GemConfig>,
    pub synth: Option<SynthConfig>,
    pub design: Option<DesignConfig>,
    /// Weight on the input in the performance output.
    pub input_weight: Option<f64>,
    /// Initial state distribution of the control task; defaults to the identified one.
    pub x0_mean: Option<Vec<f64>>,
    pub x0_cov: Option<Vec<Vec<f64>>>,
    pub runs: Option<usize>,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
}

struct Ctx {
    cfg: PipelineConfig,
    seed: u64,
    delta: f64,
    mode: TubeMode,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let cfg: PipelineConfig = match &cli.config {
            Some(p) => read_json(p)?,
            None => PipelineConfig::default(),
        };
        if cfg.version.is_some_and(|v| v != FORMAT_VERSION) {
            return invalid(format!("unsupported config version (expected {FORMAT_VERSION})"));
        }
        let delta = cli.delta.or(cfg.delta).unwrap_or(0.95);
        if !(delta > 0.0 && delta < 1.0) {
            return invalid("delta must lie in (0,1)");
        }
        let seed = cli.seed.or(cfg.seed).unwrap_or(0);
        let mode = cli.mode.or(cfg.mode).unwrap_or(TubeMode::Soc);
        Ok(Ctx { seed, delta, mode, out: cli.out.clone(), cfg })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Validation(format!("cannot create {}: {e}", self.out.display())))?;
        let p = self.path(name);
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        fs::write(&p, s).map_err(|e| Error::Validation(format!("cannot write {}: {e}", p.display())))?;
        Ok(p)
    }

    fn create(&self, name: &str) -> Result<fs::File> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Validation(format!("cannot create {}: {e}", self.out.display())))?;
        let p = self.path(name);
        fs::File::create(&p).map_err(|e| Error::Validation(format!("cannot write {}: {e}", p.display())))
    }

    fn input_weight(&self) -> f64 {
        self.cfg.input_weight.unwrap_or(study::INPUT_WEIGHT)
    }

    fn design_config(&self, nominal: bool) -> DesignConfig {
        DesignConfig { nominal, ..self.cfg.design.clone().unwrap_or_default() }
    }
}

pub fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T> {
    let s = fs::read_to_string(p).map_err(|e| Error::Validation(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

fn read_data(p: &Path) -> Result<IoData> {
    let f = fs::File::open(p).map_err(|e| Error::Validation(format!("cannot read {}: {e}", p.display())))?;
    IoData::read_csv(f).map_err(|e| Error::Parse(format!("{}: {e}", p.display())))
}

/// Output of `identify`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub version: u32,
    pub params: ModelParams,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Output of `run`: totals of the per-step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: u32,
    pub mode: TubeMode,
    pub steps: usize,
    pub cost: f64,
    pub violations: usize,
    pub fallbacks: usize,
    /// Wall-clock figures; the only nondeterministic part of the artifact.
    pub metadata: Timing,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_solve_time: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub policy: String,
    pub aggregate: Aggregate,
    pub fallbacks: usize,
    pub metadata: Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    /// Mean cost relative to the robust controller.
    pub relative_cost: f64,
    pub cost_std_err: f64,
    pub max_violation: f64,
    pub runs_violating: f64,
    pub infeasible_solves: usize,
    pub fallbacks: usize,
    pub mean_solve_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoSummary {
    pub version: u32,
    pub masses: usize,
    pub samples: usize,
    pub runs: usize,
    pub steps: usize,
    pub delta: f64,
    pub gamma_robust: f64,
    pub gamma_nominal: f64,
    pub rho: f64,
    pub policies: Vec<PolicyRow>,
    pub metadata: Timing,
}

fn performance(model: &StructuredModel, w: f64) -> PerformanceSpec {
    PerformanceSpec::output_and_input(&model.c, model.nu(), w)
}

fn x0_of(ctx: &Ctx, params: &ModelParams) -> Result<(Vector, Mat)> {
    let n = params.x0_mean.len();
    let mean = match &ctx.cfg.x0_mean {
        Some(v) => Vector::from_vec(v.clone()),
        None => params.x0_mean.clone(),
    };
    let cov = match &ctx.cfg.x0_cov {
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return invalid(format!("x0_cov must be {n}x{n}"));
            }
            Mat::from_fn(n, n, |i, j| rows[i][j])
        }
        None => params.x0_cov.clone(),
    };
    if mean.len() != n {
        return invalid(format!("x0_mean must have length {n}"));
    }
    Ok((mean, cov))
}

fn identify(ctx: &Ctx, model: &Path, data: &Path) -> Result<()> {
    let model: StructuredModel = read_json(model)?;
    let data = read_data(data)?;
    let fit = run_gem(&model, &data, None, &ctx.cfg.gem.clone().unwrap_or_default())?;
    let est = ThetaEstimate { version: FORMAT_VERSION, loglik: *fit.logliks.last().unwrap_or(&f64::NAN), iterations: fit.iterations, converged: fit.converged, params: fit.params };
    ctx.write_json("theta.json", &est)?;
    let mut w = csv::Writer::from_writer(ctx.create("gem_trace.csv")?);
    w.write_record(["iteration", "loglik"])?;
    for (k, l) in fit.logliks.iter().enumerate() {
        w.write_record([k.to_string(), format!("{l:.12e}")])?;
    }
    w.flush()?;
    println!("loglik {:.6} after {} iterations (converged: {})", est.loglik, est.iterations, est.converged);
    Ok(())
}

fn quantify(ctx: &Ctx, model: &Path, data: &Path, theta: &Path) -> Result<()> {
    let model: StructuredModel = read_json(model)?;
    let data = read_data(data)?;
    let est: ThetaEstimate = read_json(theta)?;
    let info = uq::observed_information(&model, &est.params, &data)?;
    let ell = uq::confidence_ellipsoid(&est.params.theta, &info, ctx.delta)?;
    ctx.write_json("ellipsoid.json", &ell)?;
    println!("ellipsoid over {} parameters at delta = {}", ell.dim(), ell.delta);
    Ok(())
}

fn synthesize(ctx: &Ctx, model: &Path, theta: &Path, ellipsoid: &Path) -> Result<RobustController> {
    let model: StructuredModel = read_json(model)?;
    let est: ThetaEstimate = read_json(theta)?;
    let ell: UncertaintyEllipsoid = read_json(ellipsoid)?;
    let (q, r) = model.assemble_covariances(&est.params)?;
    let perf = performance(&model, ctx.input_weight());
    let rc = dk_iterate(&SynthProblem { model: &model, ell: &ell, q: &q, r: &r, perf: &perf }, &ctx.cfg.synth.clone().unwrap_or_default())?;
    ctx.write_json("controller.json", &rc)?;
    println!("robust H2 bound {:.6e} (nominal {:.6e})", rc.gamma, rc.nominal_gamma);
    Ok(rc)
}

#[allow(clippy::too_many_arguments)]
fn design(ctx: &Ctx, model: &Path, theta: &Path, ellipsoid: &Path, controller: &Path, constraints: &Path, nominal: bool) -> Result<MpcDesign> {
    let model: StructuredModel = read_json(model)?;
    let est: ThetaEstimate = read_json(theta)?;
    let ell: UncertaintyEllipsoid = read_json(ellipsoid)?;
    let rc: RobustController = read_json(controller)?;
    let cons: ConstraintSpec = read_json(constraints)?;
    let (q, r) = model.assemble_covariances(&est.params)?;
    let perf = performance(&model, ctx.input_weight());
    let (x0_mean, x0_cov) = x0_of(ctx, &est.params)?;
    let inp = DesignInputs { model: &model, ell: &ell, controller: &rc.controller, q: &q, r: &r, perf: &perf, constraints: &cons, x0_mean: &x0_mean, x0_cov: &x0_cov };
    let d = design_mpc(&inp, &ctx.design_config(nominal))?;
    ctx.write_json("design.json", &d)?;
    println!("rho {:.4}, terminal level {:.4e}, horizon {}", d.rho, d.terminal.c_lower, d.horizon);
    Ok(d)
}

/// Closed loop of the MPC against `truth` with noise from `seed`, logged per step.
fn run(ctx: &Ctx, design_path: &Path, plant: &Path, steps: Option<usize>) -> Result<()> {
    let t0 = Instant::now();
    let d: MpcDesign = read_json(design_path)?;
    let truth: TruthSystem = read_json(plant)?;
    let steps = steps.or(ctx.cfg.steps).unwrap_or(100);
    let m = &truth.model;
    let nx = m.nx();
    if d.n() != 2 * nx || d.nu() != m.nu() {
        return invalid("design and plant dimensions differ");
    }
    let (a, b) = m.assemble_dynamics(&truth.params.theta)?;
    let (q, r) = m.assemble_covariances(&truth.params)?;
    let (qh, rh) = (linalg::psd_sqrt(&q), linalg::psd_sqrt(&r));
    let mut rng = rng_for(ctx.seed, 0);
    let x0_cov = d.sigma_bar[0].view((0, 0), (nx, nx)).into_owned();
    let mut x = sim::sample_gaussian(&mut rng, &d.mu_xi0.rows(0, nx).into_owned(), &linalg::psd_sqrt(&x0_cov));
    let mut ctrl = MpcController::new(d.clone(), ctx.mode)?;
    let mut state = MpcState::initial(&d);
    let q_c = d.q_xi.view((0, 0), (nx, nx)).into_owned();

    let mut w = csv::Writer::from_writer(ctx.create("run.csv")?);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m.ny()).map(|i| format!("y_{i}")));
    header.extend((1..=m.nu()).map(|i| format!("u_{i}")));
    header.extend((1..=m.nu()).map(|i| format!("nu_{i}")));
    header.extend(["alpha", "objective", "solve_time"].map(String::from));
    w.write_record(&header)?;
    let (mut cost, mut violations, mut solve) = (0.0, 0, 0.0);
    for t in 0..steps {
        let y = &m.c * &x + &rh * sim::gaussian_vec(&mut rng, m.ny());
        let (u, sol, next) = ctrl.step(&state, &y)?;
        let z = Vector::from_iterator(nx + u.len(), x.iter().chain(u.iter()).copied());
        violations += d.constraints.h.iter().filter(|h| h.dot(&z) > 1.0).count();
        cost += x.dot(&(&q_c * &x)) + u.dot(&(&d.r_c * &u));
        solve += sol.solve_time;
        let mut rec = vec![t.to_string()];
        rec.extend(y.iter().chain(u.iter()).chain(sol.nu[0].iter()).map(|v| format!("{v:.9e}")));
        rec.extend([format!("{:.9e}", sol.alpha[0]), format!("{:.9e}", sol.objective), format!("{:.3e}", sol.solve_time)]);
        w.write_record(&rec)?;
        x = &a * &x + &b * &u + &m.e * (&qh * sim::gaussian_vec(&mut rng, m.nw()));
        state = next;
    }
    w.flush()?;
    let summary = RunSummary {
        version: FORMAT_VERSION,
        mode: ctx.mode,
        steps,
        cost,
        violations,
        fallbacks: ctrl.fallbacks,
        metadata: Timing { wall_time: t0.elapsed().as_secs_f64(), mean_solve_time: Some(solve / steps.max(1) as f64) },
    };
    ctx.write_json("run_summary.json", &summary)?;
    println!("{steps} steps, cost {cost:.4}, {violations} constraint violations, {} fallbacks", ctrl.fallbacks);
    Ok(())
}

fn write_runs_csv(ctx: &Ctx, name: &str, runs: &[Result<RolloutMetrics>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(ctx.create(name)?);
    w.write_record(["run", "status", "cost", "violated_steps"])?;
    for (k, r) in runs.iter().enumerate() {
        match r {
            Ok(m) => w.write_record([k.to_string(), "ok".into(), format!("{:.9e}", m.total_cost()), m.violations.iter().filter(|v| v.iter().any(|&b| b)).count().to_string()])?,
            Err(e) => w.write_record([k.to_string(), e.kind().into(), String::new(), String::new()])?,
        }
    }
    w.flush()?;
    Ok(())
}

fn eval(ctx: &Ctx, scenario: &Path, design_path: Option<&Path>, controller: Option<&Path>, runs: Option<usize>) -> Result<()> {
    let t0 = Instant::now();
    let mut sc: Scenario = read_json(scenario)?;
    if let Some(r) = runs.or(ctx.cfg.runs) {
        sc.runs = r;
    }
    if let Some(s) = ctx.cfg.steps {
        sc.steps = s;
    }
    let pr = match (design_path, controller) {
        (Some(p), _) => {
            let d: MpcDesign = read_json(p)?;
            run_mpc(&d, ctx.mode, &sc, &format!("tube MPC ({})", ctx.mode))?
        }
        (None, Some(p)) => {
            let rc: RobustController = read_json(p)?;
            controller_only(&sc, &rc.controller, ctx.input_weight())
        }
        (None, None) => return invalid("eval needs --design or --controller"),
    };
    report(ctx, &pr, t0)
}

fn controller_only(sc: &Scenario, c: &Controller, input_weight: f64) -> PolicyRun {
    let perf = performance(&sc.truth.model, input_weight);
    let (aggregate, runs) = sim::monte_carlo(sc, c, None, &perf.q_c(), &perf.r_c());
    PolicyRun { name: "robust".into(), aggregate, runs, fallbacks: 0 }
}

fn report(ctx: &Ctx, pr: &PolicyRun, t0: Instant) -> Result<()> {
    let a = &pr.aggregate;
    let rep = EvalReport {
        version: FORMAT_VERSION,
        policy: pr.name.clone(),
        aggregate: a.clone(),
        fallbacks: pr.fallbacks,
        metadata: Timing { wall_time: t0.elapsed().as_secs_f64(), mean_solve_time: Some(a.mean_solve_time) },
    };
    ctx.write_json("eval.json", &rep)?;
    write_runs_csv(ctx, "eval_runs.csv", &pr.runs)?;
    println!("{}: mean cost {:.4} ± {:.4}, max violation {:.2}%, {:.0}% of runs violating", pr.name, a.mean_cost, a.cost_std_err, a.max_violation * 100.0, a.runs_violating * 100.0);
    Ok(())
}

fn demo(ctx: &Ctx, masses: usize, runs: Option<usize>, steps: Option<usize>, samples: Option<usize>) -> Result<()> {
    let t0 = Instant::now();
    if masses == 0 {
        return invalid("need at least one mass");
    }
    let runs = runs.or(ctx.cfg.runs).unwrap_or(500);
    let steps = steps.or(ctx.cfg.steps).unwrap_or(100);
    let samples = samples.or(ctx.cfg.samples).unwrap_or(2000);
    let truth = sim::build_msd_chain(masses, ctx.seed);
    let data = sim::generate_data(&truth, samples, study::EXCITATION_STD, ctx.seed.wrapping_add(1))?;
    ctx.write_json("model.json", &truth.model)?;
    ctx.write_json("truth.json", &truth)?;
    data.write_csv(ctx.create("data.csv")?)?;
    let (model_p, data_p) = (ctx.path("model.json"), ctx.path("data.csv"));
    identify(ctx, &model_p, &data_p)?;
    quantify(ctx, &model_p, &data_p, &ctx.path("theta.json"))?;
    let rc = synthesize(ctx, &model_p, &ctx.path("theta.json"), &ctx.path("ellipsoid.json"))?;
    let cons = ConstraintSpec::chain(masses, study::VELOCITY_BOUND, study::INPUT_BOUND, study::CHANCE_LEVEL)?;
    ctx.write_json("constraints.json", &cons)?;
    let (x0_mean, x0_cov) = study::chain_initial_state(masses);
    let ctx = Ctx {
        cfg: PipelineConfig { x0_mean: Some(x0_mean.iter().copied().collect()), x0_cov: Some(x0_cov.row_iter().map(|r| r.iter().copied().collect()).collect()), ..ctx.cfg.clone() },
        out: ctx.out.clone(),
        ..*ctx
    };
    let args = [ctx.path("theta.json"), ctx.path("ellipsoid.json"), ctx.path("controller.json"), ctx.path("constraints.json")];
    let nominal = design(&ctx, &model_p, &args[0], &args[1], &args[2], &args[3], true)?;
    fs::rename(ctx.path("design.json"), ctx.path("design_nominal.json")).map_err(Error::Io)?;
    let robust = design(&ctx, &model_p, &args[0], &args[1], &args[2], &args[3], false)?;
    let sc = Scenario { version: FORMAT_VERSION, truth: truth.clone(), constraints: cons, x0_mean, x0_cov, runs, steps, seed: ctx.seed.wrapping_add(2) };
    ctx.write_json("scenario.json", &sc)?;

    let results = vec![
        controller_only(&sc, &rc.controller, ctx.input_weight()),
        run_mpc(&robust, TubeMode::Lmi, &sc, "tube MPC (lmi)")?,
        run_mpc(&robust, TubeMode::Soc, &sc, "tube MPC (soc)")?,
        run_mpc(&nominal, TubeMode::Soc, &sc, "nominal SMPC")?,
    ];
    let base = results[0].aggregate.mean_cost;
    let policies: Vec<PolicyRow> = results
        .iter()
        .map(|r| PolicyRow {
            policy: r.name.clone(),
            relative_cost: r.aggregate.mean_cost / base,
            cost_std_err: r.aggregate.cost_std_err / base,
            max_violation: r.aggregate.max_violation,
            runs_violating: r.aggregate.runs_violating,
            infeasible_solves: r.aggregate.infeasible_solves,
            fallbacks: r.fallbacks,
            mean_solve_time: r.aggregate.mean_solve_time,
        })
        .collect();
    for (r, name) in results.iter().zip(["runs_robust.csv", "runs_lmi.csv", "runs_soc.csv", "runs_nominal.csv"]) {
        write_runs_csv(&ctx, name, &r.runs)?;
    }
    let summary = DemoSummary {
        version: FORMAT_VERSION,
        masses,
        samples,
        runs,
        steps,
        delta: ctx.delta,
        gamma_robust: rc.gamma,
        gamma_nominal: rc.nominal_gamma,
        rho: robust.rho,
        policies,
        metadata: Timing { wall_time: t0.elapsed().as_secs_f64(), mean_solve_time: None },
    };
    ctx.write_json("summary.json", &summary)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<16} {:>9} {:>12} {:>14} {:>11}", "policy", "cost", "solve (ms)", "max viol (%)", "runs viol").ok();
    for p in &summary.policies {
        writeln!(out, "{:<16} {:>9.3} {:>12.2} {:>14.1} {:>10.0}%", p.policy, p.relative_cost, p.mean_solve_time * 1e3, p.max_violation * 100.0, p.runs_violating * 100.0).ok();
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("D2PC_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Validation(format!("D2PC_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return invalid("D2PC_THREADS must be a positive integer");
    }
    // a second initialization (e.g. in tests) keeps the existing pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Identify { model, data } => identify(&ctx, model, data),
        Command::Uq { model, data, theta } => quantify(&ctx, model, data, theta),
        Command::Synth { model, theta, ellipsoid } => synthesize(&ctx, model, theta, ellipsoid).map(|_| ()),
        Command::Design { model, theta, ellipsoid, controller, constraints, nominal } => design(&ctx, model, theta, ellipsoid, controller, constraints, *nominal).map(|_| ()),
        Command::Run { design, plant, steps } => run(&ctx, design, plant, *steps),
        Command::Eval { scenario, design, controller, runs } => eval(&ctx, scenario, design.as_deref(), controller.as_deref(), *runs),
        Command::DemoMsd { masses, runs, steps, samples } => demo(&ctx, *masses, *runs, *steps, *samples),
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    version: u32,
    kind: &'a str,
    message: String,
    exit_code: i32,
}

/// Parses the process arguments, runs the subcommand and returns the exit code.
pub fn main_exit_code() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            // usage errors are validation errors
            if std::env::args().any(|a| a == "--json-errors") {
                report_error(&Error::Validation(e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string()), true);
            } else {
                let _ = e.print();
            }
            return 1;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => report_error(&e, cli.json_errors),
    }
}

fn report_error(e: &Error, json: bool) -> i32 {
    let code = e.exit_code();
    if json {
        let rep = ErrorReport { version: FORMAT_VERSION, kind: e.kind(), message: e.to_string(), exit_code: code };
        eprintln!("{}", serde_json::to_string(&rep).unwrap_or_default());
    } else {
        eprintln!("error: {e}");
    }
    code
}
