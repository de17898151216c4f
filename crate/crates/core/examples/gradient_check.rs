//! Backpropagation against central differences on a small MLP.
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use sgd_initlab::model::{self, Batch, MlpModel};
use sgd_initlab::optimize::init_gaussian;
use sgd_initlab::tensor::{rng_fork, Matrix};

fn loss(m: &MlpModel, batch: &Batch) -> f64 {
    model::forward(m, batch).unwrap().mean_loss
}

fn main() -> sgd_initlab::Result<()> {
    let mut rng = rng_fork(11, 0);
    let dims = [5, 7, 6, 3];
    let mut m = init_gaussian(&dims, 0.5, true, &mut rng)?;
    let inputs = Matrix::new(8, 5, (0..40).map(|_| rng.uniform()).collect())?;
    let labels = (0..8).map(|i| i % 3).collect();
    let batch = Batch::new(inputs, labels)?;

    let fp = model::forward(&m, &batch)?;
    let analytic = model::backward(&m, &batch, &fp.cache)?.flat();
    let theta = m.flat_params();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        let mut p = theta.clone();
        p[i] += h;
        m.set_flat_params(&p)?;
        let up = loss(&m, &batch);
        p[i] -= 2.0 * h;
        m.set_flat_params(&p)?;
        let down = loss(&m, &batch);
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    m.set_flat_params(&theta)?;
    println!("dims {dims:?}, {} parameters, mean loss {:.6}", theta.len(), fp.mean_loss);
    println!("max relative error of backprop vs central differences: {worst:.3e}");
    Ok(())
}
