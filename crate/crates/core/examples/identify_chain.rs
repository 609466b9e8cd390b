//! Identify a two-mass chain from simulated data and compare prediction errors.

use datapc::gem::{run_gem, GemConfig};
use datapc::sim::{build_msd_chain, generate_data};
use datapc::smoother::one_step_mse;

fn main() -> datapc::Result<()> {
    let t_len: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let truth = build_msd_chain(2, 0);
    let data = generate_data(&truth, t_len, 2.0, 1)?;
    let start = std::time::Instant::now();
    let fit = run_gem(&truth.model, &data, None, &GemConfig::default())?;
    println!("{} iterations in {:.2?}, converged: {}", fit.iterations, start.elapsed(), fit.converged);
    println!("loglik: initial {:.3}, final {:.3}", fit.logliks[0], fit.logliks.last().unwrap());
    println!("true theta:      {:.4?}", truth.params.theta.as_slice());
    println!("estimated theta: {:.4?}", fit.params.theta.as_slice());
    let val = generate_data(&truth, t_len, 2.0, 99)?;
    let e_hat = one_step_mse(&truth.model, &fit.params, &val)?;
    let e_true = one_step_mse(&truth.model, &truth.params, &val)?;
    println!("validation one-step MSE ratio (estimated / true): {:.4}", e_hat / e_true);
    Ok(())
}
