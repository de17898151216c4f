//! Dense linear algebra and deterministic random streams.

mod matrix;
mod rng;

pub use matrix::{pairwise_sum, Matrix};
pub use rng::{gaussian_matrix, rng_fork, RngState};
