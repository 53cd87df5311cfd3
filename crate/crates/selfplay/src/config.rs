//! Engine configuration: strict schema, defaults matching the reference
//! training setup, and JSON/TOML loading.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Policy-gradient variant used to turn rewards into advantages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Token-level returns with a KL penalty, standardized over the batch.
    ReinforcePp,
    /// Group-normalized scalar rewards; KL enters the loss side.
    Grpo,
    /// Leave-one-out baseline within each group.
    Rloo,
}

/// Whether to train the local toy policy or only emit triplets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TrainToy,
    EmitOnly,
}

impl std::str::FromStr for Mode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "train_toy" => Ok(Mode::TrainToy),
            "emit_only" => Ok(Mode::EmitOnly),
            other => Err(EngineError::Config(format!(
                "unknown mode {other:?}; expected train_toy or emit_only"
            ))),
        }
    }
}

/// Remote chat-completions endpoint settings (only consulted in emit mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; unset means no auth header.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Base backoff delay in milliseconds, doubled per retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Request timeout in seconds.
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_max_retries() -> u32 { 3 }
fn default_backoff_ms() -> u64 { 250 }
fn default_timeout_s() -> u64 { 120 }

/// Full engine configuration. Unknown fields are rejected so typos fail fast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    /// Responses sampled per instruction for the majority vote.
    pub n_vote: usize,
    /// Responses kept per prompt for training (equals `n_vote`; the probe
    /// rollouts are reused as training rollouts).
    pub n_samples_per_prompt: usize,
    /// Accepted instructions per step.
    pub rollout_batch_size: usize,
    /// Triplet groups per optimizer update.
    pub train_batch_size: usize,
    /// Lower difficulty bound: reject when mean vote reward < gamma_diff.
    pub gamma_diff: f64,
    /// Upper difficulty bound: reject when mean vote reward > gamma_easy.
    pub gamma_easy: f64,
    pub temperature: f64,
    /// KL penalty coefficient β.
    pub kl_coef: f64,
    /// Clipping half-width ε in the surrogate objective.
    pub clip_eps: f64,
    pub actor_lr: f64,
    pub prompt_max_len: usize,
    pub gen_max_len: usize,
    pub steps_per_iteration: u64,
    pub iterations: u64,
    pub algorithm: Algorithm,
    /// Novelty threshold: reject when max similarity > this (strict).
    pub rouge_threshold: f64,
    pub min_instruction_tokens: usize,
    pub max_instruction_tokens: usize,
    /// Seed-pool examples per few-shot prompt.
    pub fewshot_seed_count: usize,
    /// Generated-pool examples per few-shot prompt (topped up from seeds
    /// while the generated pool is short).
    pub fewshot_gen_count: usize,
    /// Candidate budget per step = this factor × rollout_batch_size.
    pub candidate_budget_factor: usize,
    pub rng_seed: u64,
    pub mode: Mode,
    /// Whole-token keyword blocklist for unanswerable instructions.
    pub banned_keywords: Vec<String>,
    /// Remote endpoint, required only when emit mode targets a live service.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub http: Option<HttpConfig>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n_vote: 16,
            n_samples_per_prompt: 16,
            rollout_batch_size: 16,
            train_batch_size: 16,
            gamma_diff: 0.2,
            gamma_easy: 0.8,
            temperature: 1.0,
            kl_coef: 1e-4,
            clip_eps: 0.2,
            actor_lr: 5e-7,
            prompt_max_len: 1024,
            gen_max_len: 1024,
            steps_per_iteration: 100,
            iterations: 3,
            algorithm: Algorithm::ReinforcePp,
            rouge_threshold: 0.7,
            min_instruction_tokens: 5,
            max_instruction_tokens: 256,
            fewshot_seed_count: 6,
            fewshot_gen_count: 2,
            candidate_budget_factor: 20,
            rng_seed: 0,
            mode: Mode::TrainToy,
            banned_keywords: default_keywords(),
            http: None,
        }
    }
}

pub fn default_keywords() -> Vec<String> {
    ["image", "graph", "picture", "figure", "diagram", "photo"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

impl EngineConfig {
    /// Checks the cross-field invariants that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma_diff) || !(0.0..=1.0).contains(&self.gamma_easy) {
            return Err(EngineError::Config(format!(
                "difficulty bounds must lie in [0, 1], got [{}, {}]",
                self.gamma_diff, self.gamma_easy
            )));
        }
        if self.gamma_diff > self.gamma_easy {
            return Err(EngineError::Config(format!(
                "gamma_diff ({}) must not exceed gamma_easy ({})",
                self.gamma_diff, self.gamma_easy
            )));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(EngineError::Config(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps)));
        }
        if self.n_vote < 2 {
            return Err(EngineError::Config(format!("n_vote must be ≥ 2, got {}", self.n_vote)));
        }
        if self.rollout_batch_size == 0 || self.train_batch_size == 0 {
            return Err(EngineError::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rouge_threshold) {
            return Err(EngineError::Config(format!(
                "rouge_threshold must lie in [0, 1], got {}",
                self.rouge_threshold
            )));
        }
        if self.min_instruction_tokens > self.max_instruction_tokens {
            return Err(EngineError::Config(format!(
                "min_instruction_tokens ({}) exceeds max_instruction_tokens ({})",
                self.min_instruction_tokens, self.max_instruction_tokens
            )));
        }
        if self.fewshot_seed_count + self.fewshot_gen_count == 0 {
            return Err(EngineError::Config("few-shot example count must be positive".into()));
        }
        if self.candidate_budget_factor == 0 {
            return Err(EngineError::Config("candidate_budget_factor must be positive".into()));
        }
        if self.temperature < 0.0 {
            return Err(EngineError::Config(format!("temperature must be ≥ 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Total few-shot examples per prompt.
    pub fn fewshot_total(&self) -> usize {
        self.fewshot_seed_count + self.fewshot_gen_count
    }

    /// Candidate budget for one step.
    pub fn step_budget(&self) -> usize {
        self.candidate_budget_factor * self.rollout_batch_size
    }
}

/// Loads a config from a JSON (`.json`) or TOML (`.toml`) file and validates it.
pub fn load_config(path: impl AsRef<Path>) -> Result<EngineConfig> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    let is_toml = path.extension().map(|e| e == "toml").unwrap_or(false);
    let cfg: EngineConfig = if is_toml {
        toml::from_str(&raw).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?
    } else {
        serde_json::from_str(&raw).map_err(|e| EngineError::Config(format!("{}: {e}", path.display())))?
    };
    cfg.validate()?;
    Ok(cfg)
}
