//! Policy-gradient numerics: KL estimators, KL-penalized token returns,
//! batch standardization, group-relative advantages, and the clipped
//! surrogate objective.

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Divisor guard used by every standardization in the engine.
pub const STD_EPS: f64 = 1e-8;

/// k1 estimator of KL(π_policy ‖ π_ref): −log_ratio per token, where
/// log_ratio = log π_policy − log π_ref. Unbiased, can be negative.
pub fn kl_k1(log_ratio: &[f64]) -> Vec<f64> {
    log_ratio.iter().map(|lr| -lr).collect()
}

/// k2 estimator: log_ratio² / 2. Non-negative, biased.
pub fn kl_k2(log_ratio: &[f64]) -> Vec<f64> {
    log_ratio.iter().map(|lr| lr * lr / 2.0).collect()
}

/// k3 estimator: ρ − log ρ − 1 with ρ = π_ref/π_policy = exp(−log_ratio).
/// Unbiased and non-negative for every sample.
pub fn kl_k3(log_ratio: &[f64]) -> Vec<f64> {
    log_ratio
        .iter()
        .map(|lr| {
            let rho = (-lr).exp();
            rho - rho.ln() - 1.0
        })
        .collect()
}

/// Token-level returns with a KL penalty: the sequence reward lands on every
/// token, discounted by β times the suffix sum of log-ratios from that token
/// on (undiscounted, γ = λ = 1).
pub fn returns_with_kl_penalty(final_reward: f64, log_ratio: &[f64], beta: f64) -> Vec<f64> {
    let mut suffix = 0.0;
    let mut out = vec![0.0; log_ratio.len()];
    for t in (0..log_ratio.len()).rev() {
        suffix += log_ratio[t];
        out[t] = final_reward - beta * suffix;
    }
    out
}

/// Standardized advantages plus the batch statistics they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBatch {
    pub advantages: Vec<Vec<f64>>,
    pub mean: f64,
    pub std: f64,
}

/// Standardizes token returns over all tokens of all sequences in the batch
/// (population statistics, ε = 1e-8 guard). A batch with fewer than two
/// tokens total cannot be standardized.
pub fn standardize(returns: &[Vec<f64>]) -> Result<AdvantageBatch> {
    let n: usize = returns.iter().map(|r| r.len()).sum();
    if n < 2 {
        return Err(EngineError::DegenerateBatch(format!(
            "standardization needs ≥ 2 tokens, got {n}"
        )));
    }
    // An exactly constant batch must come out as exact zeros: the rounded
    // mean can sit a few ULPs off the shared value, and the ε guard below
    // would amplify that residue into spurious ~1e-8 advantages.
    let first = returns.iter().flatten().next().copied().unwrap();
    if returns.iter().flatten().all(|g| *g == first) {
        return Ok(AdvantageBatch {
            advantages: returns.iter().map(|seq| vec![0.0; seq.len()]).collect(),
            mean: first,
            std: 0.0,
        });
    }
    let flat = returns.iter().flatten();
    let mean = flat.clone().sum::<f64>() / n as f64;
    let var = flat.map(|g| (g - mean) * (g - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    let advantages = returns
        .iter()
        .map(|seq| seq.iter().map(|g| (g - mean) / (std + STD_EPS)).collect())
        .collect();
    Ok(AdvantageBatch { advantages, mean, std })
}

/// Group-normalized advantages: (r − mean) / (population std + ε) within one
/// prompt's response group. Needs at least two responses.
pub fn advantage_grpo(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(EngineError::DegenerateBatch(format!(
            "group normalization needs ≥ 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + STD_EPS)).collect())
}

/// Leave-one-out advantages: each reward minus the mean of the others.
pub fn advantage_rloo(rewards: &[f64]) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(EngineError::DegenerateBatch(format!(
            "leave-one-out needs ≥ 2 rewards, got {n}"
        )));
    }
    let sum: f64 = rewards.iter().sum();
    Ok(rewards.iter().map(|r| r - (sum - r) / (n as f64 - 1.0)).collect())
}

/// Per-token diagnostics from the clipped objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipDiagnostics {
    pub ratios: Vec<f64>,
    pub objectives: Vec<f64>,
    /// True where the clipped branch was the active minimum.
    pub clipped: Vec<bool>,
}

/// Clipped surrogate loss for one sequence: −(1/|y|) Σ_t
/// min(ratio_t·Â_t, clip(ratio_t, 1−ε, 1+ε)·Â_t) with
/// ratio_t = exp(logp_new − logp_old).
pub fn clipped_loss(
    logp_new: &[f64],
    logp_old: &[f64],
    advantages: &[f64],
    eps: f64,
) -> Result<(f64, ClipDiagnostics)> {
    let t = logp_new.len();
    if t == 0 || logp_old.len() != t || advantages.len() != t {
        return Err(EngineError::Contract(format!(
            "clipped loss needs aligned non-empty inputs ({t}, {}, {})",
            logp_old.len(),
            advantages.len()
        )));
    }
    let mut ratios = Vec::with_capacity(t);
    let mut objectives = Vec::with_capacity(t);
    let mut clipped = Vec::with_capacity(t);
    let mut sum = 0.0;
    for i in 0..t {
        let ratio = (logp_new[i] - logp_old[i]).exp();
        let clamped = ratio.clamp(1.0 - eps, 1.0 + eps);
        let unclipped = ratio * advantages[i];
        let clipped_val = clamped * advantages[i];
        let obj = unclipped.min(clipped_val);
        sum += obj;
        ratios.push(ratio);
        objectives.push(obj);
        clipped.push(clipped_val < unclipped);
    }
    Ok((-(sum / t as f64), ClipDiagnostics { ratios, objectives, clipped }))
}

/// Mean clipped loss over a batch of sequences (each weighted 1/|y| internally).
pub fn clipped_loss_batch(
    logp_new: &[Vec<f64>],
    logp_old: &[Vec<f64>],
    advantages: &[Vec<f64>],
    eps: f64,
) -> Result<f64> {
    if logp_new.is_empty() {
        return Err(EngineError::DegenerateBatch("empty loss batch".into()));
    }
    if logp_new.len() != logp_old.len() || logp_new.len() != advantages.len() {
        return Err(EngineError::Contract("loss batch length mismatch".into()));
    }
    let mut total = 0.0;
    for ((n, o), a) in logp_new.iter().zip(logp_old).zip(advantages) {
        total += clipped_loss(n, o, a, eps)?.0;
    }
    Ok(total / logp_new.len() as f64)
}
