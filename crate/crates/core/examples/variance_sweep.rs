//! Final mean squared weight against the initialization scale.
//!
//! Small `sigma0` lets the weights grow (ratio above 1), large `sigma0`
//! lets them shrink; the crossover sits near the best-performing scale.
//!
//! ```text
//! cargo run --release --example variance_sweep
//! ```

use sgd_initlab::data::synthetic_blobs;
use sgd_initlab::optimize::{train, TrainConfig};
use sgd_initlab::stats::aggregate_runs;
use sgd_initlab::tensor::rng_fork;

fn main() -> sgd_initlab::Result<()> {
    let train_set = synthetic_blobs(20, 3, 1000, 2.0, 1.0, &mut rng_fork(0, 100))?;
    let val_set = synthetic_blobs(20, 3, 200, 2.0, 1.0, &mut rng_fork(0, 101))?;
    println!("{:>7} {:>11} {:>12} {:>8}", "sigma0", "final_loss", "final_vbar", "ratio");
    for sigma0 in [0.02, 0.05, 0.1, 0.2, 0.5] {
        let config = TrainConfig {
            alpha: 0.01,
            epochs: 200,
            sigma0,
            hidden_dims: vec![128, 128],
            record_every: 50,
            ..TrainConfig::default()
        };
        let records = [1]
            .iter()
            .map(|&seed| train(&config, &train_set, &val_set, seed))
            .collect::<sgd_initlab::Result<Vec<_>>>()?;
        let summary = aggregate_runs(&records)?;
        println!(
            "{sigma0:>7} {:>11.5} {:>12.5e} {:>8.4}",
            summary.train_loss.last_mean(),
            summary.final_vbar_mean(),
            summary.ratio()
        );
    }
    Ok(())
}
