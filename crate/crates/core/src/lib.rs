//! Experiments on the initialization variance of plain SGD.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense row-major matrices, Cholesky, and seeded RNG streams.
//! - [`model`]: a fully connected ReLU network with softmax/cross-entropy and
//!   exact backpropagation.
//! - [`optimize`]: Gaussian and He-normal initialization, minibatch sampling,
//!   the SGD update and the instrumented training loop.
//! - [`langevin`]: SGD on a quadratic loss as an Euler-Maruyama chain, with the
//!   Gibbs stationary law as the analytic reference.
//! - [`theory`]: KL divergence between the initial and stationary laws, the
//!   resulting loss bound, its asymptotic regimes and the optimal `sigma0`.
//! - [`stats`]: pooled weight second moments, gradient-noise estimation and
//!   aggregation over seeds.
//! - [`data`]: IDX (MNIST / Fashion-MNIST) loading and synthetic blobs.
//! - [`cli`]: the `sgd-initlab` experiment harness (CSV/JSON/SVG output).
//!
//! Each capability has a runnable program under `examples/`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod langevin;
pub mod model;
pub mod optimize;
pub mod plot;
pub mod stats;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
