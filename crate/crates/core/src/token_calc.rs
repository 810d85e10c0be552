//! Soft difficulty estimates from top-k token log-probabilities.
//!
//! Pure conversions from candidate-token lists at decision positions into
//! soft probabilities, for both the absolute and the pairwise procedure.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// One candidate token with its log-probability at a generation position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCandidate {
    pub token: String,
    pub logprob: f64,
}

impl TokenCandidate {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

/// Which branch of the soft-absolute procedure produced the fractional
/// expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsoluteCase {
    /// First completion was in [0, 1): fractional digits read directly.
    A,
    /// First completion was 1.0 with leading-token confidence at or above the
    /// threshold; fixed fallback fraction used without resampling.
    BConfident,
    /// First completion was 1.0; a resample produced a 0.d completion whose
    /// digit distribution was used.
    BResampled,
    /// Resampling exhausted its attempt budget; fixed fallback fraction used.
    BFallback,
}

/// Soft absolute difficulty estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAbsoluteEstimate {
    /// Renormalized P(I=1) for the leading integer token.
    pub p_leading_one: f64,
    /// Renormalized P(I=0) for the leading integer token.
    pub p_leading_zero: f64,
    /// Expected value of d/10 over the fractional-digit distribution.
    pub ev_frac: f64,
    /// p_leading_one + p_leading_zero * ev_frac.
    pub p_soft: f64,
    pub case: AbsoluteCase,
}

/// Provenance of a pairwise soft probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairwiseSource {
    /// Renormalized over the {"1", "0"} candidate subset.
    NormalizedTopK,
    /// Neither decision token present in top-k; unit mass on the sampled
    /// hard decision.
    HardFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseSoftRecord {
    /// Probability that the first-presented item is harder.
    pub p_first_harder: f64,
    pub source: PairwiseSource,
}

/// Exponentiates and renormalizes the log-probabilities of candidates whose
/// trimmed token is in `allowed`. Candidates sharing a trimmed token pool
/// their mass. Returns `None` when no candidate matches (no-mass signal).
pub fn normalize_over(
    candidates: &[TokenCandidate],
    allowed: &[&str],
) -> Option<BTreeMap<String, f64>> {
    let mut masses: BTreeMap<String, f64> = BTreeMap::new();
    for cand in candidates {
        let trimmed = cand.token.trim();
        if allowed.contains(&trimmed) {
            *masses.entry(trimmed.to_string()).or_insert(0.0) += cand.logprob.exp();
        }
    }
    let total: f64 = masses.values().sum();
    if total <= 0.0 {
        return None;
    }
    for v in masses.values_mut() {
        *v /= total;
    }
    Some(masses)
}

/// Expected value of d/10 over a distribution on the digits 0-9.
pub fn ev_frac(digit_dist: &[f64; 10]) -> Result<f64> {
    let total: f64 = digit_dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "digit distribution sums to {total}, expected 1"
        )));
    }
    if digit_dist.iter().any(|p| *p < 0.0) {
        return Err(Error::InvalidArgument(
            "digit distribution has a negative mass".into(),
        ));
    }
    Ok(digit_dist
        .iter()
        .enumerate()
        .map(|(d, p)| d as f64 / 10.0 * p)
        .sum())
}

/// Combines the leading-integer distribution with a fractional expectation:
/// p_soft = P(I=1) + P(I=0) * frac.
pub fn absolute_soft(
    p_leading_one: f64,
    p_leading_zero: f64,
    frac: f64,
    case: AbsoluteCase,
) -> Result<SoftAbsoluteEstimate> {
    if (p_leading_one + p_leading_zero - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "leading distribution sums to {}, expected 1",
            p_leading_one + p_leading_zero
        )));
    }
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidArgument(format!(
            "fractional expectation {frac} outside [0, 1]"
        )));
    }
    Ok(SoftAbsoluteEstimate {
        p_leading_one,
        p_leading_zero,
        ev_frac: frac,
        p_soft: p_leading_one + p_leading_zero * frac,
        case,
    })
}

/// Soft probability that the first item is harder, from the candidates at the
/// pairwise decision position. `sampled_hard` is the parsed hard decision
/// used when neither "1" nor "0" appears in the top-k list.
pub fn pairwise_soft(candidates: &[TokenCandidate], sampled_hard: u8) -> PairwiseSoftRecord {
    match normalize_over(candidates, &["1", "0"]) {
        Some(dist) => PairwiseSoftRecord {
            p_first_harder: dist.get("1").copied().unwrap_or(0.0),
            source: PairwiseSource::NormalizedTopK,
        },
        None => PairwiseSoftRecord {
            p_first_harder: sampled_hard as f64,
            source: PairwiseSource::HardFallback,
        },
    }
}
