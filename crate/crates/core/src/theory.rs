//! Closed-form quantities relating the Gaussian initial law `N(0, sigma0^2 I)`
//! to the Gibbs stationary law `p_ss ∝ exp(-2b L / (alpha sigma^2))`.
//!
//! Non-negativity of `KL(p_ss || p0)` gives, per parameter,
//!
//! ```text
//! E_ss[L / K] <= alpha sigma^2 / (2 b K) * [ K/2 log(2 pi sigma0^2) + log C + E_ss||W||^2 / (2 sigma0^2) ]
//! ```
//!
//! where `C` normalises `p_ss`. The right-hand side is minimised at
//! `sigma0^2 = E_ss||W||^2 / K`.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langevin::QuadraticModel;
use crate::tensor::Matrix;

/// Every symbol of the loss bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub alpha: f64,
    pub b: usize,
    /// Isotropic gradient-noise variance.
    pub sigma_sq: f64,
    /// Initialization variance.
    pub sigma0_sq: f64,
    /// Parameter count.
    pub k: usize,
    /// Stationary second moment `E_ss ||W||^2`.
    pub e_w_sq: f64,
    /// `log C`, the log normaliser of the stationary density.
    pub log_c: f64,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("sigma_sq", self.sigma_sq),
            ("sigma0_sq", self.sigma0_sq),
            ("e_w_sq", self.e_w_sq),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.b < 1 || self.k < 1 {
            return Err(Error::invalid("b and K must be >= 1"));
        }
        if !self.log_c.is_finite() {
            return Err(Error::invalid("log C must be finite"));
        }
        Ok(())
    }

    pub fn with_sigma0_sq(self, sigma0_sq: f64) -> Self {
        Self { sigma0_sq, ..self }
    }

    /// `E_ss ||W||^2 / K`.
    pub fn vbar(&self) -> f64 {
        self.e_w_sq / self.k as f64
    }

    fn prefactor(&self) -> f64 {
        self.alpha * self.sigma_sq / (2.0 * self.b as f64 * self.k as f64)
    }
}

fn check_positive(pairs: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in pairs {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!("{name} must be finite and > 0, got {v}")));
        }
    }
    Ok(())
}

/// `alpha sigma^2 / 2b`: the stationary covariance is this times `A^{-1}`.
pub fn temperature(alpha: f64, b: usize, sigma_sq: f64) -> f64 {
    alpha * sigma_sq / (2.0 * b as f64)
}

/// Exact `log C` for a quadratic: with `beta = b / (alpha sigma^2)`,
/// `log C = 1/2 log det(beta A) - K/2 log pi`.
pub fn log_normalizer_quadratic(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
) -> Result<f64> {
    check_positive(&[("alpha", alpha), ("sigma_sq", sigma_sq), ("b", b as f64)])?;
    let k = quad.dim() as f64;
    let beta = b as f64 / (alpha * sigma_sq);
    Ok(0.5 * (k * beta.ln() + quad.log_det()) - 0.5 * k * PI.ln())
}

/// `KL(N(mean_p, cov_p) || N(mean_q, cov_q))`.
pub fn kl_gaussians(mean_p: &[f64], cov_p: &Matrix, mean_q: &[f64], cov_q: &Matrix) -> Result<f64> {
    let k = mean_p.len();
    if mean_q.len() != k || cov_p.shape() != (k, k) || cov_q.shape() != (k, k) {
        return Err(Error::invalid("KL arguments have inconsistent dimensions"));
    }
    let lp = cov_p.cholesky_spd()?;
    let lq = cov_q.cholesky_spd()?;
    let q_inv_p = lq.cholesky_solve(cov_p)?;
    let diff: Vec<f64> = mean_q.iter().zip(mean_p).map(|(q, p)| q - p).collect();
    let q_inv_diff = lq.cholesky_solve(&Matrix::column(&diff))?;
    let maha: f64 = diff.iter().zip(q_inv_diff.as_slice()).map(|(a, b)| a * b).sum();
    Ok(0.5 * (q_inv_p.trace() + maha - k as f64 + lq.cholesky_log_det() - lp.cholesky_log_det()))
}

/// Closed-form `KL(p_ss || p0)` for `p_ss = N(0, (alpha sigma^2 / 2b) A^{-1})`
/// and `p0 = N(0, sigma0^2 I)`.
pub fn kl_gaussian_init_vs_gibbs(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
    sigma0_sq: f64,
) -> Result<f64> {
    check_positive(&[
        ("alpha", alpha),
        ("sigma_sq", sigma_sq),
        ("sigma0_sq", sigma0_sq),
        ("b", b as f64),
    ])?;
    let k = quad.dim() as f64;
    let s = temperature(alpha, b, sigma_sq);
    let a_inv = quad
        .cholesky()
        .cholesky_solve(&Matrix::identity(quad.dim()))?;
    let trace_ss = s * a_inv.trace();
    let log_det_ss = k * s.ln() - quad.log_det();
    Ok(0.5 * (trace_ss / sigma0_sq - k + k * sigma0_sq.ln() - log_det_ss))
}

/// Stationary `E_ss ||W||^2 = tr(Sigma_ss)` for a quadratic.
pub fn stationary_second_moment(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
) -> Result<f64> {
    let a_inv = quad
        .cholesky()
        .cholesky_solve(&Matrix::identity(quad.dim()))?;
    Ok(temperature(alpha, b, sigma_sq) * a_inv.trace())
}

/// Analytic `E_ss[L / K] = tr(A Sigma_ss) / 2K`; equals `alpha sigma^2 / 4b`
/// for every SPD `A`.
pub fn expected_loss_per_param(quad: &QuadraticModel, alpha: f64, b: usize, sigma_sq: f64) -> f64 {
    // tr(A * s A^{-1}) = s K
    let k = quad.dim() as f64;
    temperature(alpha, b, sigma_sq) * k / (2.0 * k)
}

/// Bound inputs for a quadratic with exact `E_ss||W||^2` and `log C`.
pub fn quadratic_bound_inputs(
    quad: &QuadraticModel,
    alpha: f64,
    b: usize,
    sigma_sq: f64,
    sigma0_sq: f64,
) -> Result<BoundInputs> {
    let inputs = BoundInputs {
        alpha,
        b,
        sigma_sq,
        sigma0_sq,
        k: quad.dim(),
        e_w_sq: stationary_second_moment(quad, alpha, b, sigma_sq)?,
        log_c: log_normalizer_quadratic(quad, alpha, b, sigma_sq)?,
    };
    inputs.validate()?;
    Ok(inputs)
}

/// Right-hand side of the per-parameter loss bound.
pub fn loss_bound_rhs(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let k = inputs.k as f64;
    let bracket = 0.5 * k * (2.0 * PI * inputs.sigma0_sq).ln()
        + inputs.log_c
        + inputs.e_w_sq / (2.0 * inputs.sigma0_sq);
    Ok(inputs.prefactor() * bracket)
}

/// `K1 = alpha sigma^2 / (4 b sigma0^2)`: for small `sigma0` the bound is
/// dominated by `K1 * vbar`. Depends on `sigma0^2`.
pub fn small_variance_bound_coefficient(
    alpha: f64,
    b: usize,
    sigma_sq: f64,
    sigma0_sq: f64,
) -> Result<f64> {
    check_positive(&[
        ("alpha", alpha),
        ("sigma_sq", sigma_sq),
        ("sigma0_sq", sigma0_sq),
        ("b", b as f64),
    ])?;
    Ok(alpha * sigma_sq / (4.0 * b as f64 * sigma0_sq))
}

/// `K2 = alpha sigma^2 / 4b`: for large `sigma0` the bound grows as
/// `K2 * log sigma0^2`.
pub fn large_variance_bound_coefficient(alpha: f64, b: usize, sigma_sq: f64) -> Result<f64> {
    check_positive(&[("alpha", alpha), ("sigma_sq", sigma_sq), ("b", b as f64)])?;
    Ok(alpha * sigma_sq / (4.0 * b as f64))
}

/// `sqrt(E_ss||W||^2 / K)`, the minimiser of [`loss_bound_rhs`] over `sigma0`.
pub fn optimal_sigma0(e_w_sq: f64, k: usize) -> Result<f64> {
    if !(e_w_sq > 0.0) || !e_w_sq.is_finite() {
        return Err(Error::invalid(format!("E||W||^2 must be > 0, got {e_w_sq}")));
    }
    if k < 1 {
        return Err(Error::invalid("K must be >= 1"));
    }
    Ok((e_w_sq / k as f64).sqrt())
}

/// The bound at its optimum `sigma0^2 = vbar`, obtained by substitution:
/// `alpha sigma^2 / 4b * [log vbar + log(2 pi e) + (2/K) log C]`.
pub fn optimized_bound_rhs(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    loss_bound_rhs(&inputs.with_sigma0_sq(inputs.vbar()))
}

/// Expanded form of [`optimized_bound_rhs`]; the two agree to rounding.
pub fn optimized_bound_expanded(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let k2 = large_variance_bound_coefficient(inputs.alpha, inputs.b, inputs.sigma_sq)?;
    Ok(k2 * (inputs.vbar().ln() + (2.0 * PI * E).ln() + 2.0 / inputs.k as f64 * inputs.log_c))
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo) || n < 1 {
        return Err(Error::invalid(format!(
            "log grid needs 0 < lo <= hi and n >= 1 (got {lo}, {hi}, {n})"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    Ok((0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect())
}

/// One row of the bound-versus-`sigma0^2` table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sigma0_sq: f64,
    pub rhs: f64,
    /// `K1(sigma0^2) * vbar`.
    pub small_variance_term: f64,
    /// `K2 * log sigma0^2`.
    pub large_variance_term: f64,
}

pub fn bound_row(inputs: &BoundInputs) -> Result<BoundRow> {
    let k1 = small_variance_bound_coefficient(
        inputs.alpha,
        inputs.b,
        inputs.sigma_sq,
        inputs.sigma0_sq,
    )?;
    let k2 = large_variance_bound_coefficient(inputs.alpha, inputs.b, inputs.sigma_sq)?;
    Ok(BoundRow {
        sigma0_sq: inputs.sigma0_sq,
        rhs: loss_bound_rhs(inputs)?,
        small_variance_term: k1 * inputs.vbar(),
        large_variance_term: k2 * inputs.sigma0_sq.ln(),
    })
}

/// Evaluates the bound at every `sigma0^2` of `grid`.
pub fn bound_table(inputs: &BoundInputs, grid: &[f64]) -> Result<Vec<BoundRow>> {
    grid.iter()
        .map(|&s| bound_row(&inputs.with_sigma0_sq(s)))
        .collect()
}
