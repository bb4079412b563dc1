//! Multi time scale state space models.
//!
//! Two coupled Gaussian state-space models — a fast one running at the raw
//! control rate and a slow one advancing once per window of `H` steps —
//! with closed-form factorized inference on both scales. The slow latent
//! ("task") linearly reconfigures the fast dynamics; beliefs carry
//! block-of-diagonals covariances so every update reduces to elementwise
//! vector arithmetic. The whole filter is differentiable and trained by
//! backpropagating a predictive Gaussian log-likelihood through the
//! inference equations.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod factored;
pub mod fts;
pub mod gaussian;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod sts;
pub mod tensor;
pub mod training;

pub use error::{MtsError, Result};
