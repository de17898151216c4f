//! SGD on a quadratic loss `L(w) = 1/2 w^T A w` as a discretised SDE with
//! isotropic Gaussian gradient noise, and the Gibbs stationary law it should
//! settle into.
//!
//! One step is Euler-Maruyama with `dt = alpha`:
//!
//! ```text
//! w <- w - alpha * A w + sqrt(alpha * eps) * sigma * xi,   eps = alpha / b,  xi ~ N(0, I)
//! ```
//!
//! The continuous-time stationary density is `p(w) ∝ exp(-2 b L(w) / (alpha sigma^2))`,
//! a zero-mean Gaussian with covariance `(alpha sigma^2 / 2b) A^{-1}`. The
//! discrete chain matches it up to `O(alpha)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{rng_fork, Matrix};
use crate::theory;

const POWER_ITERATIONS: usize = 500;

/// SPD matrix `A` of the quadratic loss, with its Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    a: Matrix,
    chol: Matrix,
}

impl QuadraticModel {
    pub fn new(a: Matrix) -> Result<Self> {
        let chol = a.cholesky_spd()?;
        Ok(Self { a, chol })
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diag(diag))
    }

    pub fn isotropic(k: usize, c: f64) -> Result<Self> {
        Self::new(Matrix::identity(k).scale(c))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn cholesky(&self) -> &Matrix {
        &self.chol
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn log_det(&self) -> f64 {
        self.chol.cholesky_log_det()
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector of length {} for a {}-dimensional quadratic",
                w.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        self.a.matvec(w)
    }

    /// Largest eigenvalue by power iteration.
    pub fn lambda_max(&self) -> f64 {
        let k = self.dim();
        let mut v: Vec<f64> = (0..k).map(|i| 1.0 + 0.37 * i as f64).collect();
        let mut lambda = 0.0;
        for _ in 0..POWER_ITERATIONS {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            let av = self.a.matvec(&v).expect("square matrix");
            let next: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
            v = av;
            if (next - lambda).abs() <= 1e-14 * next.abs() {
                lambda = next;
                break;
            }
            lambda = next;
        }
        lambda
    }
}

/// `1/2 w^T A w`.
pub fn quadratic_loss(quad: &QuadraticModel, w: &[f64]) -> Result<f64> {
    let aw = quad.gradient(w)?;
    Ok(0.5 * w.iter().zip(&aw).map(|(x, y)| x * y).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Learning rate, also the time step.
    pub alpha: f64,
    pub batch: usize,
    /// Isotropic gradient-noise variance `sigma^2`.
    pub sigma_sq: f64,
    pub steps: usize,
    pub burn_in_fraction: f64,
    /// Standard deviation of the initial iterate `w0 ~ N(0, sigma0^2 I)`.
    pub sigma0: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            batch: 10,
            sigma_sq: 1.0,
            steps: 400_000,
            burn_in_fraction: 0.5,
            sigma0: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// `alpha / b`.
    pub fn epsilon(&self) -> f64 {
        self.alpha / self.batch as f64
    }

    /// Number of iterates kept after burn-in.
    pub fn retained(&self) -> usize {
        self.steps - self.burn_in_steps()
    }

    pub fn burn_in_steps(&self) -> usize {
        (self.burn_in_fraction * self.steps as f64).floor() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.batch < 1 {
            return Err(Error::invalid("batch must be >= 1"));
        }
        if !(self.sigma_sq >= 0.0) || !(self.sigma0 >= 0.0) {
            return Err(Error::invalid("sigma^2 and sigma0 must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::invalid(format!(
                "burn_in_fraction must lie in [0, 1), got {}",
                self.burn_in_fraction
            )));
        }
        if self.steps < 1 {
            return Err(Error::invalid("steps must be >= 1"));
        }
        Ok(())
    }
}

/// Checks `alpha * lambda_max(A) < 2`, the stability condition of `I - alpha A`.
pub fn check_stability(quad: &QuadraticModel, alpha: f64) -> Result<f64> {
    let product = alpha * quad.lambda_max();
    if !(product < 2.0) {
        return Err(Error::UnstableStep { product });
    }
    Ok(product)
}

/// Runs the chain and returns the iterates after burn-in, one per row.
///
/// `w0` is drawn from RNG stream 0 of `cfg.seed`, the gradient noise from
/// stream 1.
pub fn simulate(quad: &QuadraticModel, cfg: &SimConfig) -> Result<Matrix> {
    cfg.validate()?;
    check_stability(quad, cfg.alpha)?;
    let k = quad.dim();
    let mut w = vec![0.0; k];
    rng_fork(cfg.seed, 0).fill_normal(&mut w, 0.0, cfg.sigma0);
    let mut noise = rng_fork(cfg.seed, 1);
    let noise_std = (cfg.alpha * cfg.epsilon()).sqrt() * cfg.sigma_sq.sqrt();
    let burn_in = cfg.burn_in_steps();
    let mut out = Vec::with_capacity(cfg.retained() * k);
    let mut aw = vec![0.0; k];
    let a = quad.matrix();
    for t in 1..=cfg.steps {
        for (i, g) in aw.iter_mut().enumerate() {
            *g = a.row(i).iter().zip(&w).map(|(x, y)| x * y).sum();
        }
        for (wi, gi) in w.iter_mut().zip(&aw) {
            *wi -= cfg.alpha * gi;
            if noise_std > 0.0 {
                *wi += noise_std * noise.standard_normal();
            }
        }
        if t > burn_in {
            out.extend_from_slice(&w);
        }
    }
    Matrix::new(cfg.steps - burn_in, k, out)
}

/// `(alpha sigma^2 / 2b) A^{-1}`, the covariance of the Gibbs stationary law.
pub fn stationary_covariance_oracle(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
) -> Result<Matrix> {
    let inv = quad
        .cholesky()
        .cholesky_solve(&Matrix::identity(quad.dim()))?;
    Ok(inv.scale(alpha * sigma_sq / (2.0 * b as f64)))
}

pub fn sample_mean(samples: &Matrix) -> Result<Vec<f64>> {
    if samples.rows() < 1 {
        return Err(Error::invalid("mean of zero samples"));
    }
    let mut mean = vec![0.0; samples.cols()];
    for r in 0..samples.rows() {
        for (m, x) in mean.iter_mut().zip(samples.row(r)) {
            *m += x;
        }
    }
    let n = samples.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Unbiased sample covariance (divisor `n - 1`) of the rows of `samples`.
pub fn empirical_covariance(samples: &Matrix) -> Result<Matrix> {
    let n = samples.rows();
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let k = samples.cols();
    let mean = sample_mean(samples)?;
    let mut cov = Matrix::zeros(k, k);
    let mut centered = vec![0.0; k];
    for r in 0..n {
        for ((c, x), m) in centered.iter_mut().zip(samples.row(r)).zip(&mean) {
            *c = x - m;
        }
        for i in 0..k {
            for j in i..k {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..k {
        for j in i..k {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// `log p(w)` for the Gibbs law `p ∝ exp(-2b L(w) / (alpha sigma^2))`,
/// normalised exactly.
pub fn gibbs_log_density(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
    w: &[f64],
) -> Result<f64> {
    let log_c = theory::log_normalizer_quadratic(quad, alpha, b, sigma_sq)?;
    let loss = quadratic_loss(quad, w)?;
    Ok(log_c - 2.0 * b as f64 / (alpha * sigma_sq) * loss)
}

/// Oracle-vs-simulation comparison for one quadratic and configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationaryReport {
    pub config: SimConfig,
    pub dim: usize,
    pub alpha_lambda_max: f64,
    pub retained_samples: usize,
    pub oracle_covariance: Vec<Vec<f64>>,
    pub empirical_covariance: Vec<Vec<f64>>,
    pub empirical_mean: Vec<f64>,
    /// `||S_emp - S_oracle||_F / ||S_oracle||_F`; `None` when the oracle is zero.
    pub relative_frobenius_error: Option<f64>,
    /// `KL(N(mean, S_emp) || Gibbs)`; `None` when either law is degenerate.
    pub kl_empirical_vs_gibbs: Option<f64>,
    pub tolerance: f64,
    pub passed: bool,
    /// Noise-free run: the chain collapses onto the minimum.
    pub deterministic_collapse: bool,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Simulates and compares the empirical covariance with the Gibbs oracle at
/// relative Frobenius tolerance `tolerance`.
pub fn verify_stationary(
    quad: &QuadraticModel,
    cfg: &SimConfig,
    tolerance: f64,
) -> Result<StationaryReport> {
    let alpha_lambda_max = check_stability(quad, cfg.alpha)?;
    let samples = simulate(quad, cfg)?;
    let emp = empirical_covariance(&samples)?;
    let mean = sample_mean(&samples)?;
    let oracle = stationary_covariance_oracle(quad, cfg.alpha, cfg.batch, cfg.sigma_sq)?;
    let collapse = cfg.sigma_sq == 0.0;
    let (rel, kl, passed) = if collapse {
        let tiny = emp.max_abs() < 1e-20;
        (None, None, tiny)
    } else {
        let rel = emp.relative_frobenius_error(&oracle)?;
        let zero = vec![0.0; quad.dim()];
        let kl = theory::kl_gaussians(&mean, &emp, &zero, &oracle).ok();
        (Some(rel), kl, rel < tolerance)
    };
    Ok(StationaryReport {
        config: cfg.clone(),
        dim: quad.dim(),
        alpha_lambda_max,
        retained_samples: samples.rows(),
        oracle_covariance: rows_of(&oracle),
        empirical_covariance: rows_of(&emp),
        empirical_mean: mean,
        relative_frobenius_error: rel,
        kl_empirical_vs_gibbs: kl,
        tolerance,
        passed,
        deterministic_collapse: collapse,
    })
}
