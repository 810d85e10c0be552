//! HTTP chat-completions client with retry and backoff.
//!
//! Transport and sleeping are trait objects so the retry policy can be
//! exercised with scripted faults and without real waits.

use super::{
    BackendProfile, ChatRequest, CompletionClient, CompletionResponse, RateLimiter,
    TokenPosition, Usage,
};
use crate::token_calc::TokenCandidate;
use crate::{Error, Result};
use std::sync::Arc;
use std::time::Duration;

const MAX_TRIES: u32 = 5;
const BACKOFF_BASE_MS: u64 = 1000;

#[derive(Debug, Clone)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, api_key: &str, body: &serde_json::Value) -> Result<HttpReply>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(Self { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, api_key: &str, body: &serde_json::Value) -> Result<HttpReply> {
        let response = self
            .client
            .post(url)
            .bearer_auth(api_key)
            .json(body)
            .send()
            .map_err(|e| Error::Backend(e.to_string()))?;
        let status = response.status().as_u16();
        let body = response
            .text()
            .map_err(|e| Error::Backend(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, duration: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, duration: Duration) {
        std::thread::sleep(duration);
    }
}

pub struct HttpBackend {
    profile: BackendProfile,
    transport: Box<dyn HttpTransport>,
    sleeper: Box<dyn Sleeper>,
    limiter: Option<Arc<RateLimiter>>,
}

impl HttpBackend {
    pub fn new(profile: BackendProfile, timeout: Duration) -> Result<Self> {
        Ok(Self {
            profile,
            transport: Box::new(ReqwestTransport::new(timeout)?),
            sleeper: Box::new(ThreadSleeper),
            limiter: None,
        })
    }

    pub fn with_parts(
        profile: BackendProfile,
        transport: Box<dyn HttpTransport>,
        sleeper: Box<dyn Sleeper>,
        limiter: Option<Arc<RateLimiter>>,
    ) -> Self {
        Self {
            profile,
            transport,
            sleeper,
            limiter,
        }
    }

    fn api_key(&self) -> Result<String> {
        std::env::var(&self.profile.auth_env_var).map_err(|_| Error::Auth {
            backend: self.profile.name.clone(),
            detail: format!(
                "environment variable {} not set",
                self.profile.auth_env_var
            ),
        })
    }

    fn request_body(&self, request: &ChatRequest, top_logprobs: u32) -> serde_json::Value {
        serde_json::json!({
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_message},
                {"role": "user", "content": request.user_message},
            ],
            "temperature": request.temperature,
            "logprobs": self.profile.supports_logprobs,
            "top_logprobs": top_logprobs,
        })
    }
}

fn parse_chat_body(body: &str) -> Result<(String, Vec<TokenPosition>, Usage)> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| Error::MalformedResponse(format!("invalid JSON: {e}")))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| Error::MalformedResponse("no choices in response".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| Error::MalformedResponse("missing message content".into()))?
        .to_string();

    let mut positions = Vec::new();
    if let Some(content) = choice.pointer("/logprobs/content").and_then(|c| c.as_array()) {
        for entry in content {
            let token = entry
                .get("token")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::MalformedResponse("logprob entry without token".into()))?
                .to_string();
            let logprob = entry
                .get("logprob")
                .and_then(|l| l.as_f64())
                .ok_or_else(|| Error::MalformedResponse("logprob entry without value".into()))?;
            let mut top_candidates = Vec::new();
            if let Some(top) = entry.get("top_logprobs").and_then(|t| t.as_array()) {
                for cand in top {
                    let tok = cand
                        .get("token")
                        .and_then(|t| t.as_str())
                        .ok_or_else(|| {
                            Error::MalformedResponse("top candidate without token".into())
                        })?;
                    let lp = cand.get("logprob").and_then(|l| l.as_f64()).ok_or_else(|| {
                        Error::MalformedResponse("top candidate without logprob".into())
                    })?;
                    top_candidates.push(TokenCandidate::new(tok, lp));
                }
            }
            positions.push(TokenPosition {
                token,
                logprob,
                top_candidates,
            });
        }
    }

    let usage = Usage {
        prompt_tokens: value
            .pointer("/usage/prompt_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
    };
    Ok((text, positions, usage))
}

impl CompletionClient for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<CompletionResponse> {
        let api_key = self.api_key()?;
        let top_logprobs = if request.top_logprobs > self.profile.top_k_limit {
            log::warn!(
                "top_logprobs {} exceeds {} limit {}, clamping",
                request.top_logprobs,
                self.profile.name,
                self.profile.top_k_limit
            );
            self.profile.top_k_limit
        } else {
            request.top_logprobs
        };
        let url = format!(
            "{}/chat/completions",
            self.profile.base_url.trim_end_matches('/')
        );
        let body = self.request_body(request, top_logprobs);

        let mut last_error = String::new();
        for attempt in 1..=MAX_TRIES {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let start = std::time::Instant::now();
            let outcome = self.transport.post_json(&url, &api_key, &body);
            match outcome {
                Ok(reply) if reply.status == 200 => {
                    let (text, positions, usage) = parse_chat_body(&reply.body)?;
                    return Ok(CompletionResponse {
                        text,
                        positions,
                        usage,
                        latency_ms: start.elapsed().as_millis() as u64,
                    });
                }
                Ok(reply) if reply.status == 401 || reply.status == 403 => {
                    return Err(Error::Auth {
                        backend: self.profile.name.clone(),
                        detail: format!("HTTP {}", reply.status),
                    });
                }
                Ok(reply) if reply.status == 429 || reply.status >= 500 => {
                    last_error = format!("HTTP {}", reply.status);
                }
                Ok(reply) => {
                    return Err(Error::Backend(format!(
                        "HTTP {}: {}",
                        reply.status,
                        reply.body.chars().take(200).collect::<String>()
                    )));
                }
                Err(Error::Backend(detail)) => {
                    last_error = detail;
                }
                Err(other) => return Err(other),
            }
            if attempt < MAX_TRIES {
                let backoff = BACKOFF_BASE_MS * 2u64.pow(attempt - 1);
                self.sleeper.sleep(Duration::from_millis(backoff));
            }
        }
        Err(Error::RetryExhausted {
            attempts: MAX_TRIES,
            last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    fn profile() -> BackendProfile {
        BackendProfile {
            name: "test".into(),
            base_url: "http://localhost:9".into(),
            model: "test-model".into(),
            auth_env_var: "ITEMCAL_TEST_KEY".into(),
            top_k_limit: 10,
            supports_logprobs: true,
            price_per_1k_prompt_tokens: 0.0025,
            price_per_1k_completion_tokens: 0.01,
        }
    }

    fn ok_body() -> String {
        serde_json::json!({
            "choices": [{
                "message": {"content": "[[1]]"},
                "logprobs": {"content": [
                    {"token": "[[", "logprob": -0.01, "top_logprobs": []},
                    {"token": "1", "logprob": -0.1, "top_logprobs": [
                        {"token": "1", "logprob": -0.1},
                        {"token": "0", "logprob": -2.4}
                    ]},
                    {"token": "]]", "logprob": -0.02, "top_logprobs": []}
                ]}
            }],
            "usage": {"prompt_tokens": 40, "completion_tokens": 3}
        })
        .to_string()
    }

    struct ScriptedTransport {
        script: Mutex<Vec<HttpReply>>,
        seen_bodies: Mutex<Vec<serde_json::Value>>,
    }

    impl ScriptedTransport {
        fn new(replies: Vec<HttpReply>) -> Self {
            Self {
                script: Mutex::new(replies),
                seen_bodies: Mutex::new(Vec::new()),
            }
        }
    }

    impl HttpTransport for ScriptedTransport {
        fn post_json(
            &self,
            _url: &str,
            _api_key: &str,
            body: &serde_json::Value,
        ) -> Result<HttpReply> {
            self.seen_bodies.lock().unwrap().push(body.clone());
            let mut script = self.script.lock().unwrap();
            if script.is_empty() {
                panic!("transport called more times than scripted");
            }
            Ok(script.remove(0))
        }
    }

    fn request(top_logprobs: u32) -> ChatRequest {
        ChatRequest {
            backend: "test".into(),
            model: "test-model".into(),
            system_message: "s".into(),
            user_message: "u".into(),
            temperature: 1.0,
            top_logprobs,
            ordinal: 0,
        }
    }

    struct Fwd(Arc<Mutex<Vec<Duration>>>);

    impl Sleeper for Fwd {
        fn sleep(&self, d: Duration) {
            self.0.lock().unwrap().push(d);
        }
    }

    fn backend(replies: Vec<HttpReply>) -> (HttpBackend, Arc<Mutex<Vec<Duration>>>) {
        std::env::set_var("ITEMCAL_TEST_KEY", "k");
        let naps = Arc::new(Mutex::new(Vec::new()));
        let backend = HttpBackend::with_parts(
            profile(),
            Box::new(ScriptedTransport::new(replies)),
            Box::new(Fwd(naps.clone())),
            None,
        );
        (backend, naps)
    }

    #[test]
    fn scripted_429_then_success_backs_off_once() {
        let (backend, naps) = backend(vec![
            HttpReply {
                status: 429,
                body: String::new(),
            },
            HttpReply {
                status: 200,
                body: ok_body(),
            },
        ]);
        let resp = backend.complete(&request(5)).unwrap();
        assert_eq!(resp.text, "[[1]]");
        assert_eq!(resp.usage.prompt_tokens, 40);
        let naps = naps.lock().unwrap();
        assert_eq!(naps.as_slice(), &[Duration::from_millis(1000)]);
    }

    #[test]
    fn backoff_doubles_until_exhaustion() {
        let replies = (0..5)
            .map(|_| HttpReply {
                status: 503,
                body: String::new(),
            })
            .collect();
        let (backend, naps) = backend(replies);
        match backend.complete(&request(5)) {
            Err(Error::RetryExhausted { attempts, .. }) => assert_eq!(attempts, 5),
            other => panic!("expected RetryExhausted, got {other:?}"),
        }
        let naps = naps.lock().unwrap();
        let millis: Vec<u64> = naps.iter().map(|d| d.as_millis() as u64).collect();
        assert_eq!(millis, vec![1000, 2000, 4000, 8000]);
    }

    #[test]
    fn request_body_carries_clamped_top_k() {
        std::env::set_var("ITEMCAL_TEST_KEY", "k");
        let transport = ScriptedTransport::new(vec![HttpReply {
            status: 200,
            body: ok_body(),
        }]);
        let seen = Arc::new(Mutex::new(Vec::new()));
        struct Probe {
            inner: ScriptedTransport,
            seen: Arc<Mutex<Vec<serde_json::Value>>>,
        }
        impl HttpTransport for Probe {
            fn post_json(
                &self,
                url: &str,
                key: &str,
                body: &serde_json::Value,
            ) -> Result<HttpReply> {
                self.seen.lock().unwrap().push(body.clone());
                self.inner.post_json(url, key, body)
            }
        }
        let backend = HttpBackend::with_parts(
            profile(),
            Box::new(Probe {
                inner: transport,
                seen: seen.clone(),
            }),
            Box::new(ThreadSleeper),
            None,
        );
        backend.complete(&request(50)).unwrap();
        let bodies = seen.lock().unwrap();
        assert_eq!(bodies[0]["top_logprobs"], 10);
    }

    #[test]
    fn auth_error_when_env_var_missing() {
        std::env::remove_var("ITEMCAL_MISSING_KEY");
        let mut p = profile();
        p.auth_env_var = "ITEMCAL_MISSING_KEY".into();
        let backend = HttpBackend::with_parts(
            p,
            Box::new(ScriptedTransport::new(vec![])),
            Box::new(ThreadSleeper),
            None,
        );
        assert!(matches!(
            backend.complete(&request(5)),
            Err(Error::Auth { .. })
        ));
    }

    #[test]
    fn malformed_body_is_a_distinct_error() {
        let (backend, _) = backend(vec![HttpReply {
            status: 200,
            body: "{}".into(),
        }]);
        assert!(matches!(
            backend.complete(&request(5)),
            Err(Error::MalformedResponse(_))
        ));
    }
}
