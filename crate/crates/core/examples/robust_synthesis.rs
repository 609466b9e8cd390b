//! Identify a 2-mass chain, then synthesize robust H2 controllers with both multiplier classes.

use datapc::study::chain_study;
use datapc::synth::{dk_iterate, MultiplierMode, SynthConfig, SynthProblem};

fn main() -> datapc::Result<()> {
    let mut args = std::env::args().skip(1);
    let delta: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.95);
    let t_len: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let (_, id) = chain_study(2, 0, t_len, delta)?;
    let (q, r) = id.covariances()?;
    let perf = id.performance();
    let prob = SynthProblem { model: &id.model, ell: &id.ellipsoid, q: &q, r: &r, perf: &perf };
    for mode in [MultiplierMode::FullBlock, MultiplierMode::Overapprox] {
        let start = std::time::Instant::now();
        let rc = dk_iterate(&prob, &SynthConfig { mode, ..SynthConfig::default() })?;
        println!(
            "{mode:?}: gamma {:.6e}  nominal {:.6e}  ratio {:.4}  iterations {}  ({:.1?})",
            rc.gamma,
            rc.nominal_gamma,
            rc.gamma / rc.nominal_gamma,
            rc.gamma_trace.len(),
            start.elapsed()
        );
        println!("  trace {:?}", rc.gamma_trace);
    }
    Ok(())
}
