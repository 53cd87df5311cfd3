//! Core data types shared by every stage of the engine: instructions, sampled
//! responses, rewarded training triplets, and resumable run state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Where an instruction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Loaded from the seed dataset; `created_step` is always 0.
    Seed,
    /// Produced by the instruction generator during a run.
    Generated,
}

/// A single instruction (task statement) in the seed or generated pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: String,
    pub text: String,
    pub source: Source,
    /// Step at which the instruction entered the pool (0 for seeds).
    pub created_step: u64,
    /// Highest similarity against the dedup pool, recorded when the novelty
    /// filter ran; `None` until then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_similarity: Option<f64>,
}

impl Instruction {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: Source, created_step: u64) -> Self {
        Instruction { id: id.into(), text: text.into(), source, created_step, max_similarity: None }
    }

    /// Text must be non-empty after trimming and seeds must carry step 0.
    pub fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(EngineError::Contract(format!("instruction {} has blank text", self.id)));
        }
        if self.source == Source::Seed && self.created_step != 0 {
            return Err(EngineError::Contract(format!(
                "seed instruction {} has created_step {}",
                self.id, self.created_step
            )));
        }
        Ok(())
    }
}

/// One sampled completion for an instruction, with per-token log-probs under
/// the sampling policy and the frozen reference policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseSample {
    pub instruction_id: String,
    pub tokens: Vec<String>,
    pub logp_policy: Vec<f64>,
    pub logp_ref: Vec<f64>,
    pub raw_text: String,
    /// Canonicalized extracted answer; `None` when extraction failed.
    pub answer: Option<String>,
    /// Set once the vote-based reward has been assigned.
    pub reward: Option<f64>,
}

impl ResponseSample {
    /// Token and log-prob sequences must be non-empty, aligned, and log-probs
    /// must be valid (≤ 0).
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(EngineError::Contract("response has no tokens".into()));
        }
        if self.tokens.len() != self.logp_policy.len() || self.tokens.len() != self.logp_ref.len() {
            return Err(EngineError::Contract(format!(
                "response token/log-prob length mismatch: {} tokens, {} policy, {} ref",
                self.tokens.len(),
                self.logp_policy.len(),
                self.logp_ref.len()
            )));
        }
        for &lp in self.logp_policy.iter().chain(self.logp_ref.iter()) {
            if !(lp <= 0.0) {
                return Err(EngineError::Contract(format!("log-prob {lp} is not ≤ 0")));
            }
        }
        Ok(())
    }

    /// Per-token log π_policy − log π_ref, the quantity the KL penalty is
    /// estimated from.
    pub fn log_ratios(&self) -> Vec<f64> {
        self.logp_policy.iter().zip(&self.logp_ref).map(|(p, r)| p - r).collect()
    }
}

/// A fully assembled training example: instruction, response, scalar reward,
/// and the per-token returns/advantages fed to the update rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedTriplet {
    pub instruction: Instruction,
    pub response: ResponseSample,
    pub reward: f64,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RewardedTriplet {
    pub fn validate(&self) -> Result<()> {
        self.instruction.validate()?;
        self.response.validate()?;
        let t = self.response.tokens.len();
        if self.returns.len() != t || self.advantages.len() != t {
            return Err(EngineError::Contract(format!(
                "triplet return/advantage length mismatch: {} tokens, {} returns, {} advantages",
                t,
                self.returns.len(),
                self.advantages.len()
            )));
        }
        Ok(())
    }
}

/// Resumable run state. The policy checkpoint is opaque at this layer; only
/// the backend that produced it can interpret it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationState {
    pub step: u64,
    pub iteration: u64,
    pub seed_pool: Vec<Instruction>,
    pub generated_pool: Vec<Instruction>,
    /// Serialized RNG so a resumed run continues the exact stream.
    pub rng: rand_chacha::ChaCha8Rng,
    /// Backend-defined policy snapshot (absent for stateless backends).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<serde_json::Value>,
    /// Monotonic event counters (accepted, rejections by reason, ...).
    pub counters: BTreeMap<String, u64>,
}

impl IterationState {
    pub fn bump(&mut self, key: &str, by: u64) {
        *self.counters.entry(key.to_string()).or_insert(0) += by;
    }

    /// Iteration index implied by the step counter.
    pub fn expected_iteration(&self, steps_per_iteration: u64) -> u64 {
        if steps_per_iteration == 0 { 0 } else { self.step / steps_per_iteration }
    }
}
