//! Item difficulty calibration toolkit.
//!
//! Estimates empirical item difficulty from response logs with a Rasch model
//! (marginal maximum likelihood via EM with Gauss-Hermite quadrature), elicits
//! predictive difficulty judgements from chat-completion LLMs in absolute and
//! pairwise formats (hard decisions or token-probability soft estimates,
//! zero- or few-shot), aggregates pairwise judgements with a Bradley-Terry
//! model, and quantifies agreement with bootstrapped Spearman correlations
//! and condition contrasts.

pub mod analysis;
pub mod bt;
pub mod elicit;
pub mod error;
pub mod gateway;
pub mod pipeline;
pub mod quadrature;
pub mod rasch;
pub mod token_calc;

pub use error::{Error, Result};

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
