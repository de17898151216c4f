//! Fixed-point search for the initialization scale whose variance SGD keeps.
//!
//! Each iteration trains from `sigma0^2` and moves toward the final mean
//! squared weight: `s <- (1 - gamma) s + gamma vbar`.
//!
//! ```text
//! cargo run --release --example sigma_search
//! ```

use sgd_initlab::data::synthetic_blobs;
use sgd_initlab::optimize::{train, TrainConfig};
use sgd_initlab::tensor::rng_fork;

fn main() -> sgd_initlab::Result<()> {
    let train_set = synthetic_blobs(20, 3, 1000, 2.0, 1.0, &mut rng_fork(0, 100))?;
    let val_set = synthetic_blobs(20, 3, 200, 2.0, 1.0, &mut rng_fork(0, 101))?;
    let gamma = 0.5;
    let mut s2: f64 = 0.05 * 0.05;
    for iter in 0..6 {
        let config = TrainConfig {
            alpha: 0.01,
            epochs: 200,
            sigma0: s2.sqrt(),
            hidden_dims: vec![128, 128],
            record_every: 200,
            ..TrainConfig::default()
        };
        let record = train(&config, &train_set, &val_set, 1)?;
        let vbar = record.final_vbar();
        let ratio = vbar / s2;
        println!(
            "iter {iter}: sigma0 = {:.5}, vbar = {vbar:.5e}, ratio = {ratio:.4}, loss = {:.5}",
            s2.sqrt(),
            record.last().train_loss
        );
        if (ratio - 1.0).abs() < 0.01 {
            break;
        }
        s2 = (1.0 - gamma) * s2 + gamma * vbar;
    }
    Ok(())
}
