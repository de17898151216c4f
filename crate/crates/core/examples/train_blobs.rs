//! One SGD run on synthetic blobs with the weight-variance trace and the
//! gradient-noise scale at the end of training.
//!
//! ```text
//! cargo run --release --example train_blobs
//! ```

use sgd_initlab::data::synthetic_blobs;
use sgd_initlab::optimize::{train_model, TrainConfig};
use sgd_initlab::stats::estimate_noise_scale;
use sgd_initlab::tensor::rng_fork;
use sgd_initlab::theory::small_variance_bound_coefficient;

fn main() -> sgd_initlab::Result<()> {
    let mut rng = rng_fork(0, 100);
    let train = synthetic_blobs(20, 3, 400, 2.0, 1.0, &mut rng)?;
    let val = synthetic_blobs(20, 3, 100, 2.0, 1.0, &mut rng_fork(0, 101))?;
    let config = TrainConfig {
        alpha: 0.01,
        epochs: 60,
        sigma0: 0.3,
        hidden_dims: vec![64, 64],
        record_every: 10,
        ..TrainConfig::default()
    };

    let (record, model) = train_model(&config, &train, &val, 7)?;
    println!("{} parameters, {} SGD steps", record.num_params, record.steps);
    println!("{:>6} {:>11} {:>11} {:>8} {:>12}", "epoch", "train_loss", "val_loss", "val_acc", "vbar");
    for s in &record.snapshots {
        println!(
            "{:>6} {:>11.5} {:>11.5} {:>8.4} {:>12.5e}",
            s.epoch, s.train_loss, s.val_loss, s.val_acc, s.vbar
        );
    }

    let sigma_sq = estimate_noise_scale(&model, &train, 1000, &mut rng_fork(7, 2))?;
    let sigma0_sq = config.sigma0 * config.sigma0;
    let k1 = small_variance_bound_coefficient(config.alpha, config.batch_size, sigma_sq, sigma0_sq)?;
    println!("\nsigma_hat^2 = {sigma_sq:.4e}");
    println!("final vbar / sigma0^2 = {:.4}", record.final_vbar() / sigma0_sq);
    println!(
        "final loss per parameter {:.3e}, K1 * vbar {:.3e}",
        record.last().train_loss / record.num_params as f64,
        k1 * record.final_vbar()
    );
    Ok(())
}
