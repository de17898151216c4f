//! Oracles shared by the integration and acceptance tests. They are written
//! independently of the library code paths they check.

#![allow(dead_code)]

use sgd_initlab::data::Dataset;
use sgd_initlab::model::{self, Batch, MlpModel};
use sgd_initlab::tensor::{gaussian_matrix, Matrix, RngState};

/// Dense solve by Gaussian elimination with partial pivoting.
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

/// Solves `A S + S A = Q` through the Kronecker system
/// `(I (x) A + A (x) I) vec(S) = vec(Q)`.
pub fn lyapunov_solve(a: &Matrix, q: &Matrix) -> Matrix {
    let k = a.rows();
    let mut big = vec![vec![0.0; k * k]; k * k];
    // vec index of S[i][j] is i * k + j; (A S)[i][j] = sum_m A[i][m] S[m][j]
    for i in 0..k {
        for j in 0..k {
            let r = i * k + j;
            for m in 0..k {
                big[r][m * k + j] += a[(i, m)];
                big[r][i * k + m] += a[(m, j)];
            }
        }
    }
    let rhs = q.as_slice().to_vec();
    Matrix::new(k, k, solve_dense(big, rhs)).unwrap()
}

/// `G^T G + 0.1 I` for a standard Gaussian `G`.
pub fn random_spd(k: usize, rng: &mut RngState) -> Matrix {
    let g = gaussian_matrix(k, k, 0.0, 1.0, rng).unwrap();
    let mut a = g.t_matmul(&g).unwrap();
    for i in 0..k {
        a[(i, i)] += 0.1;
    }
    a
}

/// Random MLP with layer widths bounded by `max_dims` and a random batch.
pub fn random_problem(rng: &mut RngState, max_dims: &[usize]) -> (MlpModel, Batch) {
    let n_layers = 2 + rng.below(max_dims.len() - 1);
    let mut dims: Vec<usize> = (0..n_layers).map(|i| 1 + rng.below(max_dims[i])).collect();
    let last = dims.len() - 1;
    dims[last] = dims[last].max(2);
    let biases = rng.uniform() < 0.5;
    let mut m = MlpModel::zeros(&dims, biases).unwrap();
    let params: Vec<f64> = (0..m.num_params()).map(|_| rng.standard_normal()).collect();
    m.set_flat_params(&params).unwrap();
    let b = 1 + rng.below(5);
    let inputs: Vec<f64> = (0..b * dims[0]).map(|_| rng.uniform()).collect();
    let labels = (0..b).map(|_| rng.below(dims[last])).collect();
    let batch = Batch::new(Matrix::new(b, dims[0], inputs).unwrap(), labels).unwrap();
    (m, batch)
}

/// Largest relative discrepancy between `backward` and central differences,
/// with the denominator floored at `1e-3`.
pub fn max_gradient_error(m: &MlpModel, batch: &Batch, h: f64) -> f64 {
    let fp = model::forward(m, batch).unwrap();
    let analytic = model::backward(m, batch, &fp.cache).unwrap().flat();
    let theta = m.flat_params();
    let loss_at = |p: &[f64]| {
        let mut probe = m.clone();
        probe.set_flat_params(p).unwrap();
        // plain mean of per-example cross-entropy, no library reductions
        let probs = model::predict(&probe, batch.inputs()).unwrap();
        batch
            .labels()
            .iter()
            .enumerate()
            .map(|(r, &y)| -probs.row(r)[y].ln())
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        let up = loss_at(&p);
        p[i] = theta[i] - h;
        let down = loss_at(&p);
        let numeric = (up - down) / (2.0 * h);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

pub fn blobs(d: usize, m: usize, n_per_class: usize, sep: f64, sigma: f64, seed: u64) -> Dataset {
    let mut rng = sgd_initlab::tensor::rng_fork(seed, 100);
    sgd_initlab::data::synthetic_blobs(d, m, n_per_class, sep, sigma, &mut rng).unwrap()
}
