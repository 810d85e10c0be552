//! Deterministic offline judge backend.
//!
//! Emits the same wire shape as a logprob-capable chat backend: bracketed
//! judgements with per-position top-k candidate lists whose masses are
//! consistent with the sampling distribution. Fully seeded; the sample drawn
//! for a given request depends only on the configured seed and the request
//! digest (including the resample ordinal), so concurrent and repeated runs
//! agree.

use super::{ChatRequest, CompletionClient, CompletionResponse, TokenPosition, Usage};
use crate::token_calc::TokenCandidate;
use crate::{sigmoid, Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Ground truth for one item.
#[derive(Debug, Clone, Copy)]
pub struct MockTruth {
    /// Rasch difficulty on the logit scale.
    pub difficulty_logit: f64,
    /// Population expected proportion correct.
    pub expected_p: f64,
}

#[derive(Debug, Clone)]
pub struct MockJudgeConfig {
    /// Pairwise discrimination temperature; 0 means noiseless sign decisions.
    pub tau: f64,
    /// SD of the latent perturbation around the true expected proportion in
    /// the absolute procedure; 0 means noiseless rounding.
    pub digit_spread: f64,
    pub seed: u64,
}

pub struct MockJudgeBackend {
    truth: BTreeMap<String, MockTruth>,
    /// (task text, item id); texts must uniquely identify items.
    texts: Vec<(String, String)>,
    config: MockJudgeConfig,
}

const MIN_MASS: f64 = 1e-12;

/// Abramowitz-Stegun 7.1.26 erf approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * (1.0 + erf((x - mean) / (sd * std::f64::consts::SQRT_2)))
}

impl MockJudgeBackend {
    pub fn new(
        truth: BTreeMap<String, MockTruth>,
        texts: Vec<(String, String)>,
        config: MockJudgeConfig,
    ) -> Self {
        Self {
            truth,
            texts,
            config,
        }
    }

    fn rng_for(&self, request: &ChatRequest) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(request.cache_key().as_bytes());
        let digest = hasher.finalize();
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
    }

    /// Items referenced by the user message, in order of appearance.
    fn items_in(&self, user_message: &str) -> Vec<&str> {
        let mut found: Vec<(usize, &str)> = Vec::new();
        for (text, item_id) in &self.texts {
            if let Some(pos) = user_message.find(text.as_str()) {
                found.push((pos, item_id));
            }
        }
        found.sort();
        found.into_iter().map(|(_, id)| id).collect()
    }

    fn truth_for(&self, item_id: &str) -> Result<MockTruth> {
        self.truth
            .get(item_id)
            .copied()
            .ok_or_else(|| Error::Backend(format!("mock backend has no truth for '{item_id}'")))
    }

    /// Probability of each rounded judgement 0.0, 0.1, ..., 1.0 for an item
    /// with true expected proportion `p`.
    fn category_distribution(&self, p: f64) -> [f64; 11] {
        let mut dist = [0.0; 11];
        let s = self.config.digit_spread;
        if s == 0.0 {
            let k = ((p * 10.0).round() as usize).min(10);
            dist[k] = 1.0;
            return dist;
        }
        for (k, slot) in dist.iter_mut().enumerate() {
            let lo = if k == 0 {
                f64::NEG_INFINITY
            } else {
                k as f64 / 10.0 - 0.05
            };
            let hi = if k == 10 {
                f64::INFINITY
            } else {
                k as f64 / 10.0 + 0.05
            };
            let cdf_hi = if hi.is_infinite() {
                1.0
            } else {
                normal_cdf(hi, p, s)
            };
            let cdf_lo = if lo.is_infinite() {
                0.0
            } else {
                normal_cdf(lo, p, s)
            };
            *slot = (cdf_hi - cdf_lo).max(0.0);
        }
        let total: f64 = dist.iter().sum();
        for slot in &mut dist {
            *slot /= total;
        }
        dist
    }

    fn pairwise_response(
        &self,
        first: MockTruth,
        second: MockTruth,
        rng: &mut ChaCha8Rng,
        usage: Usage,
    ) -> CompletionResponse {
        let diff = first.difficulty_logit - second.difficulty_logit;
        let q = if self.config.tau == 0.0 {
            if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                0.0
            } else {
                0.5
            }
        } else {
            sigmoid(diff / self.config.tau)
        };
        let first_harder = rng.gen::<f64>() < q;
        let decision = if first_harder { "1" } else { "0" };
        let q_clamped = q.clamp(MIN_MASS, 1.0 - MIN_MASS);
        let candidates = vec![
            TokenCandidate::new("1", q_clamped.ln()),
            TokenCandidate::new("0", (1.0 - q_clamped).ln()),
        ];
        let sampled_lp = if first_harder {
            q_clamped.ln()
        } else {
            (1.0 - q_clamped).ln()
        };
        CompletionResponse {
            text: format!("[[{decision}]]"),
            positions: vec![
                TokenPosition {
                    token: "[[".into(),
                    logprob: -1e-9,
                    top_candidates: vec![TokenCandidate::new("[[", -1e-9)],
                },
                TokenPosition {
                    token: decision.into(),
                    logprob: sampled_lp,
                    top_candidates: candidates,
                },
                TokenPosition {
                    token: "]]".into(),
                    logprob: -1e-9,
                    top_candidates: vec![TokenCandidate::new("]]", -1e-9)],
                },
            ],
            usage,
            latency_ms: 4,
        }
    }

    fn absolute_response(
        &self,
        truth: MockTruth,
        rng: &mut ChaCha8Rng,
        top_k: usize,
        usage: Usage,
    ) -> CompletionResponse {
        let dist = self.category_distribution(truth.expected_p);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        let mut category = 10;
        for (k, &mass) in dist.iter().enumerate() {
            acc += mass;
            if draw < acc {
                category = k;
                break;
            }
        }

        let p_one = dist[10].clamp(MIN_MASS, 1.0 - MIN_MASS);
        let p_zero = 1.0 - p_one;
        let leading_candidates = vec![
            TokenCandidate::new("1", p_one.ln()),
            TokenCandidate::new("0", p_zero.ln()),
        ];

        // digit distribution conditional on a 0.d completion
        let frac_mass: f64 = dist[..10].iter().sum();
        let mut digit_candidates: Vec<TokenCandidate> = (0..10)
            .map(|d| {
                let p = if frac_mass > 0.0 {
                    (dist[d] / frac_mass).clamp(MIN_MASS, 1.0)
                } else {
                    MIN_MASS
                };
                TokenCandidate::new(d.to_string(), p.ln())
            })
            .collect();
        digit_candidates
            .sort_by(|a, b| b.logprob.partial_cmp(&a.logprob).unwrap());
        digit_candidates.truncate(top_k.max(1));

        let (leading, digit, text) = if category == 10 {
            ("1", "0".to_string(), "[[1.0]]".to_string())
        } else {
            (
                "0",
                category.to_string(),
                format!("[[0.{category}]]"),
            )
        };
        let digit_position = if category == 10 {
            // under the 1.0 branch the fractional token is always "0" and its
            // candidate list does not describe the 0.d uncertainty
            TokenPosition {
                token: "0".into(),
                logprob: -1e-9,
                top_candidates: vec![TokenCandidate::new("0", -1e-9)],
            }
        } else {
            TokenPosition {
                token: digit.clone(),
                logprob: digit_candidates
                    .iter()
                    .find(|c| c.token == digit)
                    .map(|c| c.logprob)
                    .unwrap_or(MIN_MASS.ln()),
                top_candidates: digit_candidates,
            }
        };

        CompletionResponse {
            text,
            positions: vec![
                TokenPosition {
                    token: "[[".into(),
                    logprob: -1e-9,
                    top_candidates: vec![TokenCandidate::new("[[", -1e-9)],
                },
                TokenPosition {
                    token: leading.into(),
                    logprob: if leading == "1" {
                        p_one.ln()
                    } else {
                        p_zero.ln()
                    },
                    top_candidates: leading_candidates,
                },
                TokenPosition {
                    token: ".".into(),
                    logprob: -1e-9,
                    top_candidates: vec![TokenCandidate::new(".", -1e-9)],
                },
                digit_position,
                TokenPosition {
                    token: "]]".into(),
                    logprob: -1e-9,
                    top_candidates: vec![TokenCandidate::new("]]", -1e-9)],
                },
            ],
            usage,
            latency_ms: 4,
        }
    }
}

impl CompletionClient for MockJudgeBackend {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResponse> {
        let mut rng = self.rng_for(request);
        let items = self.items_in(&request.user_message);
        let usage = Usage {
            prompt_tokens: ((request.system_message.len() + request.user_message.len()) / 4)
                as u64,
            completion_tokens: 5,
        };
        match items.as_slice() {
            [single] => {
                let truth = self.truth_for(single)?;
                Ok(self.absolute_response(
                    truth,
                    &mut rng,
                    request.top_logprobs as usize,
                    usage,
                ))
            }
            [first, second] => {
                let a = self.truth_for(first)?;
                let b = self.truth_for(second)?;
                Ok(self.pairwise_response(a, b, &mut rng, usage))
            }
            other => Err(Error::Backend(format!(
                "mock backend matched {} task texts in the user message",
                other.len()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn backend(tau: f64, spread: f64) -> MockJudgeBackend {
        let mut truth = BTreeMap::new();
        truth.insert(
            "easy".to_string(),
            MockTruth {
                difficulty_logit: -2.0,
                expected_p: 0.88,
            },
        );
        truth.insert(
            "hard".to_string(),
            MockTruth {
                difficulty_logit: 1.5,
                expected_p: 0.22,
            },
        );
        let texts = vec![
            ("3 + 5".to_string(), "easy".to_string()),
            ("487 + 659".to_string(), "hard".to_string()),
        ];
        MockJudgeBackend::new(truth, texts, MockJudgeConfig {
            tau,
            digit_spread: spread,
            seed: 99,
        })
    }

    fn request(user: &str, ordinal: u32) -> ChatRequest {
        ChatRequest {
            backend: "mock".into(),
            model: "mock".into(),
            system_message: "sys".into(),
            user_message: user.into(),
            temperature: 1.0,
            top_logprobs: 10,
            ordinal,
        }
    }

    #[test]
    fn noiseless_pairwise_decision_is_sign_of_difference() {
        let backend = backend(0.0, 0.0);
        let msg = "Task A: 487 + 659\nTask B: 3 + 5";
        for ordinal in 0..5 {
            let resp = backend.complete(&request(msg, ordinal)).unwrap();
            assert_eq!(resp.text, "[[1]]");
        }
        let msg_rev = "Task A: 3 + 5\nTask B: 487 + 659";
        let resp = backend.complete(&request(msg_rev, 0)).unwrap();
        assert_eq!(resp.text, "[[0]]");
    }

    #[test]
    fn pairwise_candidate_masses_sum_to_one() {
        let backend = backend(1.0, 0.0);
        let resp = backend
            .complete(&request("A: 3 + 5 B: 487 + 659", 0))
            .unwrap();
        let decision = &resp.positions[1];
        let total: f64 = decision
            .top_candidates
            .iter()
            .map(|c| c.logprob.exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_requests_are_reproducible() {
        let backend = backend(1.0, 0.2);
        let r1 = backend.complete(&request("task: 3 + 5", 0)).unwrap();
        let r2 = backend.complete(&request("task: 3 + 5", 0)).unwrap();
        assert_eq!(r1, r2);
        // a resample can differ and must at least be independently drawn
        let r3 = backend.complete(&request("task: 3 + 5", 1)).unwrap();
        let _ = r3;
    }

    #[test]
    fn noiseless_absolute_rounds_truth() {
        let backend = backend(0.0, 0.0);
        let resp = backend.complete(&request("task: 3 + 5", 0)).unwrap();
        assert_eq!(resp.text, "[[0.9]]");
    }

    #[test]
    fn absolute_positions_follow_bracket_shape() {
        let backend = backend(0.0, 0.15);
        let resp = backend.complete(&request("task: 487 + 659", 0)).unwrap();
        assert_eq!(resp.positions.len(), 5);
        assert_eq!(resp.positions[0].token, "[[");
        assert!(resp.positions[1].token == "0" || resp.positions[1].token == "1");
        assert_eq!(resp.positions[2].token, ".");
        assert_eq!(resp.positions[4].token, "]]");
        // leading candidates form a two-point distribution
        let total: f64 = resp.positions[1]
            .top_candidates
            .iter()
            .map(|c| c.logprob.exp())
            .sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn unknown_text_is_an_error() {
        let backend = backend(0.0, 0.0);
        assert!(backend.complete(&request("nothing matches", 0)).is_err());
    }
}
