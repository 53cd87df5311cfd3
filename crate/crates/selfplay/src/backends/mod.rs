//! Generation backends: the trait the engine drives, a local toy policy that
//! can actually be trained, and an HTTP client for chat-completions services.

pub mod http;
pub mod toy;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::error::{EngineError, Result};
use crate::types::{Instruction, ResponseSample, RewardedTriplet};

/// Decoding parameters passed with every generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_tokens: usize,
    /// Stop sequences, honored by backends that support them.
    pub stop: Vec<String>,
}

impl GenerationParams {
    pub fn new(temperature: f64, max_tokens: usize) -> Self {
        GenerationParams { temperature, max_tokens, stop: Vec::new() }
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop.push(stop.into());
        self
    }
}

/// A free-form completion plus whether generation hit the length limit.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub truncated: bool,
}

/// What a backend can do; the orchestrator adapts to missing capabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapabilities {
    /// Whether sampled responses carry reference-policy log-probs. When they
    /// do not, the KL coefficient is forced to zero.
    pub has_ref_logprobs: bool,
    /// Whether `update` is implemented.
    pub trainable: bool,
}

/// Statistics from one policy update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_reward: f64,
    /// Mean k1 KL estimate over the batch tokens.
    pub mean_kl: f64,
}

/// A text-generation service the engine can drive. Implementations must be
/// deterministic given the caller's RNG (remote services exempted).
pub trait GenerationBackend {
    fn capabilities(&self) -> BackendCapabilities;

    /// Free-form continuation of a prompt (used for instruction synthesis).
    fn complete(&mut self, prompt: &str, params: &GenerationParams, rng: &mut ChaCha8Rng) -> Result<Completion>;

    /// Samples `n` responses for an instruction with per-token log-probs.
    fn sample(
        &mut self,
        instruction: &Instruction,
        n: usize,
        params: &GenerationParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ResponseSample>>;

    /// Applies one policy update from rewarded triplets. Backends that cannot
    /// train reject the call.
    fn update(&mut self, batch: &[RewardedTriplet], cfg: &EngineConfig) -> Result<UpdateStats> {
        let _ = (batch, cfg);
        Err(EngineError::Backend("backend does not support policy updates".into()))
    }

    /// Opaque policy snapshot for checkpointing.
    fn checkpoint(&self) -> Result<serde_json::Value> {
        Ok(serde_json::Value::Null)
    }

    /// Restores a snapshot produced by `checkpoint`.
    fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        if snapshot.is_null() {
            Ok(())
        } else {
            Err(EngineError::Checkpoint("backend does not support snapshots".into()))
        }
    }
}
