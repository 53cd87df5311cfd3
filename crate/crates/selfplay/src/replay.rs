//! Offline verification of an emitted triplet log: rewards are recomputed by
//! re-running the majority vote over each group's logged answers, and
//! advantages are rebuilt with the configured algorithm, then both are
//! compared against the logged values.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::{Algorithm, EngineConfig};
use crate::dataset::TripletRecord;
use crate::error::{EngineError, Result};
use crate::rewarding;
use crate::rlcore;

/// Replay outcome: worst absolute deviations between logged and recomputed
/// values.
#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub steps: usize,
    pub groups: usize,
    pub responses: usize,
    pub max_reward_dev: f64,
    pub max_advantage_dev: f64,
}

impl ReplayReport {
    pub fn within(&self, tolerance: f64) -> bool {
        self.max_reward_dev <= tolerance && self.max_advantage_dev <= tolerance
    }
}

/// Splits one step's records into vote groups: records were written group by
/// group, so a group is a run of consecutive identical instruction texts,
/// capped at `n_vote` (two same-text groups may sit side by side).
fn group_step<'a>(records: &[&'a TripletRecord], n_vote: usize) -> Vec<Vec<&'a TripletRecord>> {
    let mut groups: Vec<Vec<&TripletRecord>> = Vec::new();
    for rec in records {
        match groups.last_mut() {
            Some(g) if g.len() < n_vote && g[0].instruction == rec.instruction => g.push(rec),
            _ => groups.push(vec![rec]),
        }
    }
    groups
}

/// Recomputes rewards and advantages for a full triplet log and reports the
/// largest deviations from the logged values.
pub fn replay(records: &[TripletRecord], cfg: &EngineConfig) -> Result<ReplayReport> {
    if records.is_empty() {
        return Err(EngineError::Contract("replay over an empty triplet log".into()));
    }
    let mut by_step: BTreeMap<u64, Vec<&TripletRecord>> = BTreeMap::new();
    for rec in records {
        by_step.entry(rec.step).or_default().push(rec);
    }

    let mut n_groups = 0usize;
    let mut max_reward_dev = 0.0f64;
    let mut max_advantage_dev = 0.0f64;

    for (step, step_records) in &by_step {
        let groups = group_step(step_records, cfg.n_vote);
        n_groups += groups.len();

        // rewards: one majority vote per group over the logged answers
        let mut recomputed_rewards: Vec<f64> = Vec::with_capacity(step_records.len());
        for group in &groups {
            let answers: Vec<Option<String>> = group.iter().map(|r| r.answer.clone()).collect();
            let vote = rewarding::majority_vote(&answers).map_err(|e| {
                EngineError::Contract(format!("step {step}: vote could not be recomputed: {e}"))
            })?;
            for (rec, r) in group.iter().zip(&vote.rewards) {
                max_reward_dev = max_reward_dev.max((rec.reward - r).abs());
                recomputed_rewards.push(*r);
            }
        }

        // advantages: rebuilt exactly as the runner built them
        match cfg.algorithm {
            Algorithm::ReinforcePp => {
                let returns: Vec<Vec<f64>> = step_records.iter().map(|r| r.returns.clone()).collect();
                let batch = rlcore::standardize(&returns)?;
                for (rec, adv) in step_records.iter().zip(&batch.advantages) {
                    if rec.advantages.len() != adv.len() {
                        return Err(EngineError::Contract(format!(
                            "step {step}: advantage length mismatch in log"
                        )));
                    }
                    for (a, b) in rec.advantages.iter().zip(adv) {
                        max_advantage_dev = max_advantage_dev.max((a - b).abs());
                    }
                }
            }
            Algorithm::Grpo | Algorithm::Rloo => {
                let mut idx = 0usize;
                for group in &groups {
                    let rewards = &recomputed_rewards[idx..idx + group.len()];
                    idx += group.len();
                    let scalars = match cfg.algorithm {
                        Algorithm::Grpo => rlcore::advantage_grpo(rewards)?,
                        _ => rlcore::advantage_rloo(rewards)?,
                    };
                    for (rec, a) in group.iter().zip(&scalars) {
                        for logged in &rec.advantages {
                            max_advantage_dev = max_advantage_dev.max((logged - a).abs());
                        }
                        // returns should be the raw reward broadcast
                        for ret in &rec.returns {
                            max_reward_dev = max_reward_dev.max((ret - rec.reward).abs());
                        }
                    }
                }
            }
        }
    }

    Ok(ReplayReport {
        steps: by_step.len(),
        groups: n_groups,
        responses: records.len(),
        max_reward_dev,
        max_advantage_dev,
    })
}
