//! The stationary-loss bound as a function of the initial variance.
//!
//! ```text
//! cargo run --example theory_bound
//! ```

use sgd_initlab::langevin::QuadraticModel;
use sgd_initlab::theory::{
    bound_table, expected_loss_per_param, log_grid, optimal_sigma0, optimized_bound_rhs,
    quadratic_bound_inputs,
};

fn main() -> sgd_initlab::Result<()> {
    let quad = QuadraticModel::diagonal(&[0.5, 1.0, 2.0, 4.0])?;
    let (alpha, b, sigma_sq) = (0.01, 100, 1.0);
    let inputs = quadratic_bound_inputs(&quad, alpha, b, sigma_sq, 1.0)?;

    println!("{:>11} {:>12} {:>12} {:>12}", "sigma0^2", "rhs", "K1*vbar", "K2*log s0^2");
    for row in bound_table(&inputs, &log_grid(1e-6, 1e2, 9)?)? {
        println!(
            "{:>11.3e} {:>12.5e} {:>12.5e} {:>12.5e}",
            row.sigma0_sq, row.rhs, row.small_variance_term, row.large_variance_term
        );
    }

    let best = optimal_sigma0(inputs.e_w_sq, inputs.k)?;
    println!("\noptimal sigma0 = {best:.5e} (sigma0^2 = {:.5e})", best * best);
    println!("optimized bound = {:.6e}", optimized_bound_rhs(&inputs)?);
    println!("E_ss[L/K]       = {:.6e}", expected_loss_per_param(&quad, alpha, b, sigma_sq));
    Ok(())
}
