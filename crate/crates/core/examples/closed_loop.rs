//! Constrained control of the identified 2-mass chain: robust controller versus tube MPC in
//! both tube modes and a certainty-equivalent stochastic MPC, evaluated by Monte Carlo.

use datapc::mpcdesign::DesignConfig;
use datapc::mpconline::TubeMode;
use datapc::study::{case_study, run_mpc, run_robust, PolicyRun};

fn main() -> datapc::Result<()> {
    let mut args = std::env::args().skip(1);
    let runs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(500);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(100);
    let cs = case_study(2, 0, 2000, 0.95)?;
    let robust_design = cs.design(&DesignConfig::default())?;
    let nominal_design = cs.design(&DesignConfig { nominal: true, ..DesignConfig::default() })?;
    let sc = cs.scenario(runs, steps, 7);
    let results: Vec<PolicyRun> = vec![
        run_robust(&cs, &sc),
        run_mpc(&robust_design, TubeMode::Lmi, &sc, "tube MPC (lmi)")?,
        run_mpc(&robust_design, TubeMode::Soc, &sc, "tube MPC (soc)")?,
        run_mpc(&nominal_design, TubeMode::Soc, &sc, "nominal SMPC")?,
    ];
    let base = results[0].aggregate.mean_cost;
    println!("{:<16} {:>8} {:>12} {:>14} {:>12}", "policy", "cost", "solve (ms)", "max viol (%)", "runs viol");
    for r in &results {
        let a = &r.aggregate;
        println!(
            "{:<16} {:>8.3} {:>12.2} {:>14.1} {:>12.2}",
            r.name,
            a.mean_cost / base,
            a.mean_solve_time * 1e3,
            a.max_violation * 100.0,
            a.runs_violating
        );
    }
    Ok(())
}
