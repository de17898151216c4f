//! Discretized Langevin dynamics on a quadratic loss and its Gibbs law.
//!
//! ```text
//! cargo run --release --example langevin_gibbs
//! ```

use sgd_initlab::langevin::{verify_stationary, QuadraticModel, SimConfig};
use sgd_initlab::tensor::Matrix;
use sgd_initlab::theory::{kl_gaussian_init_vs_gibbs, log_normalizer_quadratic};

fn main() -> sgd_initlab::Result<()> {
    let a = Matrix::new(2, 2, vec![2.0, 0.6, 0.6, 1.0])?;
    let quad = QuadraticModel::new(a)?;
    let cfg = SimConfig {
        alpha: 0.01,
        batch: 10,
        sigma_sq: 1.0,
        steps: 200_000,
        ..SimConfig::default()
    };
    let report = verify_stationary(&quad, &cfg, 0.05)?;
    println!("alpha * lambda_max = {:.3}", report.alpha_lambda_max);
    println!("Gibbs covariance      {:?}", report.oracle_covariance);
    println!("empirical covariance  {:?}", report.empirical_covariance);
    println!(
        "relative Frobenius error {:.4} (tolerance {}): {}",
        report.relative_frobenius_error.unwrap_or(f64::NAN),
        report.tolerance,
        if report.passed { "ok" } else { "too large" }
    );

    let log_c = log_normalizer_quadratic(&quad, cfg.alpha, cfg.batch, cfg.sigma_sq)?;
    println!("\nlog C = {log_c:.5}");
    for sigma0_sq in [1e-4, 1e-3, 1e-2, 1e-1] {
        let kl = kl_gaussian_init_vs_gibbs(&quad, cfg.alpha, cfg.batch, cfg.sigma_sq, sigma0_sq)?;
        println!("KL(N(0, {sigma0_sq:e} I) || Gibbs) = {kl:.5}");
    }
    Ok(())
}
