//! Empirical coverage of the confidence ellipsoid over repeated identification experiments.

use datapc::gem::{run_gem, GemConfig};
use datapc::sim::{build_msd_chain, generate_data};
use datapc::uq::{confidence_ellipsoid, observed_information};
use rayon::prelude::*;

fn main() -> datapc::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let t_len: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let truth = build_msd_chain(2, 0);
    let deltas = [0.8, 0.9, 0.95];
    let start = std::time::Instant::now();
    let hits: Vec<[bool; 3]> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate_data(&truth, t_len, 2.0, 1000 + rep)?;
            let fit = run_gem(&truth.model, &data, None, &GemConfig::default())?;
            let info = observed_information(&truth.model, &fit.params, &data)?;
            let mut out = [false; 3];
            for (k, &d) in deltas.iter().enumerate() {
                out[k] = confidence_ellipsoid(&fit.params.theta, &info, d)?.contains(&truth.params.theta);
            }
            Ok(out)
        })
        .collect::<datapc::Result<_>>()?;
    for (k, d) in deltas.iter().enumerate() {
        let rate = hits.iter().filter(|h| h[k]).count() as f64 / reps as f64;
        println!("delta {d:.2}: coverage {rate:.3}");
    }
    println!("{reps} repetitions in {:.1?}", start.elapsed());
    Ok(())
}
