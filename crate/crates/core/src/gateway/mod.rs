//! Uniform client for OpenAI-protocol chat-completion backends with top-k
//! log-probabilities, plus a disk response cache, rate limiting, retry
//! policy, and a deterministic mock backend for offline runs.

pub mod cache;
pub mod http;
pub mod mock;
pub mod rate_limit;

pub use cache::{CachedClient, DiskCache};
pub use http::{HttpBackend, HttpReply, HttpTransport, ReqwestTransport};
pub use mock::{MockJudgeBackend, MockJudgeConfig, MockTruth};
pub use rate_limit::{Clock, RateLimiter, SystemClock, VirtualClock};

use crate::token_calc::TokenCandidate;
use crate::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Static description of one chat-completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub auth_env_var: String,
    /// Deployment-specific cap on `top_logprobs`.
    pub top_k_limit: u32,
    pub supports_logprobs: bool,
    pub price_per_1k_prompt_tokens: f64,
    pub price_per_1k_completion_tokens: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One generated token with its sampled log-probability and the top-k
/// candidate list at that position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenPosition {
    pub token: String,
    pub logprob: f64,
    pub top_candidates: Vec<TokenCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub positions: Vec<TokenPosition>,
    pub usage: Usage,
    pub latency_ms: u64,
}

/// A single chat request. `ordinal` distinguishes deliberate resamples of an
/// otherwise identical request so that caching cannot short-circuit a
/// resampling loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub backend: String,
    pub model: String,
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub top_logprobs: u32,
    pub ordinal: u32,
}

impl ChatRequest {
    /// Stable digest over every request field, including the resample ordinal.
    pub fn cache_key(&self) -> String {
        let mut hasher = Sha256::new();
        for part in [
            self.backend.as_str(),
            self.model.as_str(),
            self.system_message.as_str(),
            self.user_message.as_str(),
        ] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        hasher.update(self.temperature.to_le_bytes());
        hasher.update(self.top_logprobs.to_le_bytes());
        hasher.update(self.ordinal.to_le_bytes());
        hex(&hasher.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Anything that can answer a chat request: the HTTP backend, the cache
/// wrapper, or the offline mock.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResponse>;
}
