use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// A seeded random stream.
///
/// Backed by ChaCha8, a counter-based generator: `(seed, stream_id)` selects
/// a key and stream, and each stream has its own 2^64-block counter space,
/// so forked streams never overlap. Output is identical on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    inner: ChaCha8Rng,
    stream_id: u64,
    spare_normal: Option<f64>,
}

/// Opens stream `stream_id` of the generator keyed by `base_seed`.
pub fn rng_fork(base_seed: u64, stream_id: u64) -> RngState {
    let mut inner = ChaCha8Rng::seed_from_u64(base_seed);
    inner.set_stream(stream_id);
    RngState {
        inner,
        stream_id,
        spare_normal: None,
    }
}

impl RngState {
    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform double in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    #[inline]
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.random_range(0..bound)
    }

    /// Standard normal draw (Box-Muller; the second variate is cached).
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare_normal = Some(radius * sin);
        radius * cos
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    pub fn fill_normal(&mut self, out: &mut [f64], mean: f64, std: f64) {
        for v in out {
            *v = self.normal(mean, std);
        }
    }
}

/// `rows x cols` matrix of i.i.d. `N(mean, std^2)` entries.
pub fn gaussian_matrix(
    rows: usize,
    cols: usize,
    mean: f64,
    std: f64,
    rng: &mut RngState,
) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian std must be finite and >= 0, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(Matrix::filled(rows, cols, mean));
    }
    let mut m = Matrix::zeros(rows, cols);
    rng.fill_normal(m.as_mut_slice(), mean, std);
    Ok(m)
}
