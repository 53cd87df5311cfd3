//! HTTP generation backend speaking a chat-completions JSON dialect, with
//! bounded retries and exponential backoff. It cannot train and reports no
//! reference log-probs; callers are expected to disable the KL penalty.

use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::backends::{BackendCapabilities, Completion, GenerationBackend, GenerationParams, UpdateStats};
use crate::config::{EngineConfig, HttpConfig};
use crate::error::{EngineError, Result};
use crate::types::{Instruction, ResponseSample, RewardedTriplet};

/// Blocking HTTP client for a completions endpoint.
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
    finish_reason: Option<String>,
    logprobs: Option<LogprobsBlock>,
}

#[derive(Debug, Deserialize)]
struct Message {
    content: String,
}

#[derive(Debug, Deserialize)]
struct LogprobsBlock {
    content: Vec<TokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<HttpBackend> {
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                EngineError::BackendAuth(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(cfg.timeout_s))
            .build()
            .map_err(|e| EngineError::Backend(format!("failed to build HTTP client: {e}")))?;
        Ok(HttpBackend { cfg, client, api_key })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    /// Posts a request, retrying 429/5xx/transport failures with exponential
    /// backoff. Auth failures (401/403) abort immediately.
    fn post(&self, body: &serde_json::Value) -> Result<ChatResponse> {
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1u64 << (attempt - 1).min(16));
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            let mut req = self.client.post(self.endpoint()).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<ChatResponse>()
                            .map_err(|e| EngineError::Backend(format!("malformed response body: {e}")));
                    }
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(EngineError::BackendAuth(format!(
                            "request rejected with status {status}"
                        )));
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_err = format!("status {status}");
                        continue;
                    }
                    return Err(EngineError::Backend(format!("request failed with status {status}")));
                }
                Err(e) => {
                    // timeouts and connection problems are retryable
                    last_err = e.to_string();
                    continue;
                }
            }
        }
        Err(EngineError::Backend(format!(
            "request failed after {} retries: {last_err}",
            self.cfg.max_retries
        )))
    }

    fn request_body(&self, prompt: &str, n: usize, params: &GenerationParams, logprobs: bool) -> serde_json::Value {
        let mut body = serde_json::json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": n,
        });
        if logprobs {
            body["logprobs"] = serde_json::Value::Bool(true);
        }
        if !params.stop.is_empty() {
            body["stop"] = serde_json::json!(params.stop);
        }
        body
    }
}

fn choice_to_sample(choice: &Choice, instruction_id: &str) -> Result<ResponseSample> {
    let block = choice
        .logprobs
        .as_ref()
        .ok_or_else(|| EngineError::Backend("backend returned no token log-probs".into()))?;
    if block.content.is_empty() {
        return Err(EngineError::Backend("backend returned an empty token sequence".into()));
    }
    let tokens: Vec<String> = block.content.iter().map(|t| t.token.clone()).collect();
    // clamp stray positive values from float noise; a log-prob cannot exceed 0
    let logp: Vec<f64> = block.content.iter().map(|t| t.logprob.min(0.0)).collect();
    let sample = ResponseSample {
        instruction_id: instruction_id.to_string(),
        tokens,
        logp_policy: logp.clone(),
        // no reference model behind this endpoint: mirror the policy
        // log-probs so every log-ratio is exactly zero
        logp_ref: logp,
        raw_text: choice.message.content.clone(),
        answer: None,
        reward: None,
    };
    sample.validate()?;
    Ok(sample)
}

impl GenerationBackend for HttpBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { has_ref_logprobs: false, trainable: false }
    }

    fn complete(&mut self, prompt: &str, params: &GenerationParams, _rng: &mut ChaCha8Rng) -> Result<Completion> {
        let body = self.request_body(prompt, 1, params, false);
        let resp = self.post(&body)?;
        let choice = resp
            .choices
            .first()
            .ok_or_else(|| EngineError::Backend("response contained no choices".into()))?;
        Ok(Completion {
            text: choice.message.content.clone(),
            truncated: choice.finish_reason.as_deref() == Some("length"),
        })
    }

    fn sample(
        &mut self,
        instruction: &Instruction,
        n: usize,
        params: &GenerationParams,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ResponseSample>> {
        let body = self.request_body(&instruction.text, n, params, true);
        let resp = self.post(&body)?;
        if resp.choices.len() < n {
            return Err(EngineError::Backend(format!(
                "asked for {n} samples, backend returned {}",
                resp.choices.len()
            )));
        }
        resp.choices.iter().take(n).map(|c| choice_to_sample(c, &instruction.id)).collect()
    }

    fn update(&mut self, _batch: &[RewardedTriplet], _cfg: &EngineConfig) -> Result<UpdateStats> {
        Err(EngineError::Backend("the HTTP backend cannot apply policy updates".into()))
    }
}
