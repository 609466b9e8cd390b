use datapc::lfr::{self, PerformanceSpec};
use datapc::linalg::{self, Mat, Vector};
use datapc::model::StructuredModel;
use datapc::sim::rng_for;
use datapc::synth::{dk_iterate, MultiplierMode, RobustController, SynthConfig, SynthProblem};
use datapc::uq::UncertaintyEllipsoid;
use rand::Rng;

struct Instance {
    model: StructuredModel,
    ell: UncertaintyEllipsoid,
    q: Mat,
    r: Mat,
    perf: PerformanceSpec,
}

fn random_instance(seed: u64) -> Instance {
    let mut rng = rng_for(seed, 0);
    let (nx, nu, ny) = (2, 1, 1);
    let c = Mat::from_fn(ny, nx, |_, _| rng.gen_range(-1.0..1.0));
    let model = StructuredModel::unstructured(c.clone(), nu);
    let mut a = Mat::from_fn(nx, nx, |_, _| rng.gen_range(-1.0..1.0));
    a *= rng.gen_range(0.5..1.1) / linalg::spectral_radius(&a).max(0.1);
    let b = Mat::from_fn(nx, nu, |_, _| rng.gen_range(-1.0..1.0));
    let theta = model.theta_from_dynamics(&a, &b);
    model.validate().unwrap();
    let n = theta.len();
    let g = Mat::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let sig = (&g * g.transpose() + linalg::eye(n)) * 2e-4;
    let ell = UncertaintyEllipsoid::from_covariance(theta, sig, 0.9).unwrap();
    let perf = PerformanceSpec::output_and_input(&c, nu, 0.1);
    Instance { model, ell, q: linalg::eye(nx) * 0.01, r: linalg::eye(ny) * 0.01, perf }
}

fn synth(inst: &Instance, mode: MultiplierMode) -> datapc::Result<RobustController> {
    let p = SynthProblem { model: &inst.model, ell: &inst.ell, q: &inst.q, r: &inst.r, perf: &inst.perf };
    dk_iterate(&p, &SynthConfig { mode, ..SynthConfig::default() })
}

fn assert_monotone(trace: &[f64]) {
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-6), "trace increased: {trace:?}");
    }
}

/// Exact per-parameter H2 norm never exceeds the certificate.
fn check_certificate(inst: &Instance, rc: &RobustController, samples: usize, seed: u64) {
    let open = lfr::build_open_lfr(&inst.model, &inst.ell).unwrap();
    let cl = lfr::close_loop(&open, &rc.controller, &inst.q, &inst.r, &inst.perf).unwrap();
    let mut rng = rng_for(seed, 1);
    for _ in 0..samples {
        let th: Vector = inst.ell.sample_boundary_biased(&mut rng);
        let a = cl.a_of(&th);
        assert!(linalg::spectral_radius(&a) < 1.0);
        let h2 = lfr::h2_norm(&a, &cl.b_d, &cl.c_eps).unwrap();
        assert!(h2 <= rc.gamma + 1e-6, "sampled H2 {h2} above certificate {}", rc.gamma);
    }
}

#[test]
fn dk_trace_is_monotone_on_random_systems() {
    let mut done = 0;
    let mut ordering_violations = Vec::new();
    for seed in 0..80 {
        if done == 20 {
            break;
        }
        let inst = random_instance(seed);
        let Ok(full) = synth(&inst, MultiplierMode::FullBlock) else { continue };
        assert_monotone(&full.gamma_trace);
        assert!(full.gamma >= full.nominal_gamma * (1.0 - 1e-6));
        check_certificate(&inst, &full, 50, seed);
        if let Ok(approx) = synth(&inst, MultiplierMode::Overapprox) {
            assert_monotone(&approx.gamma_trace);
            check_certificate(&inst, &approx, 50, seed);
            if approx.gamma < full.gamma * (1.0 - 1e-6) {
                ordering_violations.push((seed, full.gamma, approx.gamma));
            }
        }
        done += 1;
    }
    assert_eq!(done, 20, "too few feasible random instances");
    eprintln!("over-approximation ordering violations: {ordering_violations:?}");
}
