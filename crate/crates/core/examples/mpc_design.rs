//! Offline tube MPC design for the identified 2-mass chain: contraction rate, tube shape,
//! covariance bounds, tightenings and terminal set.

use datapc::mpcdesign::DesignConfig;
use datapc::study::case_study;

fn main() -> datapc::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_cov: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let start = std::time::Instant::now();
    let cs = case_study(2, 0, 2000, 0.95)?;
    println!("robust controller gamma {:.4e} ({:.1?})", cs.robust.gamma, start.elapsed());
    for nominal in [false, true] {
        let t0 = std::time::Instant::now();
        let d = cs.design(&DesignConfig { n_cov, nominal, ..DesignConfig::default() })?;
        println!("{} design ({:.1?})", if nominal { "nominal" } else { "robust" }, t0.elapsed());
        let feasible = d.grid.iter().filter(|g| g.objective.is_some()).count();
        println!("  rho {:.4}  feasible grid points {feasible}/{}", d.rho, d.grid.len());
        println!("  f {:?}", d.f.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>());
        for (j, row) in d.c.iter().enumerate() {
            println!("  c[{j}] t=0 {:.4}  t=1 {:.4}  t=N {:.4}", row[0], row[1.min(row.len() - 1)], row[row.len() - 1]);
        }
        println!("  c_lower {:.4}  sigma_bar {:.4}", d.terminal.c_lower, d.terminal.sigma_bar);
    }
    Ok(())
}
