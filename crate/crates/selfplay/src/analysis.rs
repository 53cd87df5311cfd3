//! Offline analysis: greedy/consensus evaluation against gold answers,
//! agreement between vote-based self-rewards and rule-based rewards, and
//! lexical diversity of the generated pool.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backends::{GenerationBackend, GenerationParams};
use crate::backends::toy;
use crate::config::EngineConfig;
use crate::dataset::{EvalItem, TripletRecord};
use crate::error::{EngineError, Result};
use crate::rewarding;
use crate::textmetrics;
use crate::types::{Instruction, Source};

/// One evaluated item: greedy answer and sampled-consensus answer vs gold.
#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub id: String,
    pub instruction: String,
    pub gold: String,
    pub greedy_answer: Option<String>,
    pub greedy_correct: bool,
    pub majority_answer: Option<String>,
    pub majority_correct: bool,
}

/// Accuracy of greedy decoding (pass@1) and of majority voting over `n_vote`
/// sampled responses (maj@N) on a gold-labeled eval set.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_vote: usize,
    pub pass_at_1: f64,
    pub maj_at_n: f64,
    pub records: Vec<EvalRecord>,
}

/// Evaluates the backend on gold-labeled items: pass@1 uses greedy decoding
/// (temperature 0), maj@N votes over `n_vote` samples at the configured
/// sampling temperature.
pub fn evaluate(
    backend: &mut dyn GenerationBackend,
    items: &[EvalItem],
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(EngineError::Contract("evaluation over an empty item list".into()));
    }
    let greedy_params = GenerationParams::new(0.0, cfg.gen_max_len);
    let vote_params = GenerationParams::new(cfg.temperature, cfg.gen_max_len);
    let mut records = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let inst = Instruction::new(format!("eval-{i:04}"), item.instruction.clone(), Source::Generated, 1);
        let gold = rewarding::canonicalize(&item.answer);

        let greedy = backend.sample(&inst, 1, &greedy_params, rng)?;
        let greedy_answer = rewarding::extract_answer(&greedy[0].raw_text);
        let greedy_correct = greedy_answer.as_deref() == Some(gold.as_str());

        let votes = backend.sample(&inst, cfg.n_vote, &vote_params, rng)?;
        let answers: Vec<Option<String>> =
            votes.iter().map(|s| rewarding::extract_answer(&s.raw_text)).collect();
        let (majority_answer, majority_correct) = match rewarding::majority_vote(&answers) {
            Ok(v) => {
                let correct = v.majority_answer == gold;
                (Some(v.majority_answer), correct)
            }
            Err(EngineError::NoMajority { .. }) => (None, false),
            Err(e) => return Err(e),
        };

        records.push(EvalRecord {
            id: inst.id,
            instruction: item.instruction.clone(),
            gold,
            greedy_answer,
            greedy_correct,
            majority_answer,
            majority_correct,
        });
    }
    let n = records.len();
    let pass_at_1 = records.iter().filter(|r| r.greedy_correct).count() as f64 / n as f64;
    let maj_at_n = records.iter().filter(|r| r.majority_correct).count() as f64 / n as f64;
    Ok(EvalReport { n, n_vote: cfg.n_vote, pass_at_1, maj_at_n, records })
}

/// Cosine similarity between a self-reward vector and a rule-based reward
/// vector over the same responses. Two all-zero vectors agree perfectly;
/// exactly one all-zero vector is total disagreement.
pub fn reward_agreement(self_rewards: &[f64], rule_rewards: &[f64]) -> Result<f64> {
    if self_rewards.len() != rule_rewards.len() {
        return Err(EngineError::Contract(format!(
            "reward vectors differ in length: {} vs {}",
            self_rewards.len(),
            rule_rewards.len()
        )));
    }
    if self_rewards.is_empty() {
        return Err(EngineError::Contract("reward agreement over empty vectors".into()));
    }
    let dot: f64 = self_rewards.iter().zip(rule_rewards).map(|(a, b)| a * b).sum();
    let na: f64 = self_rewards.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = rule_rewards.iter().map(|b| b * b).sum::<f64>().sqrt();
    match (na == 0.0, nb == 0.0) {
        (true, true) => Ok(1.0),
        (true, false) | (false, true) => Ok(0.0),
        _ => Ok(dot / (na * nb)),
    }
}

/// Agreement between logged self-rewards and rule-based rewards recomputed
/// from each toy task's true answer.
#[derive(Debug, Clone, Serialize)]
pub struct AgreementReport {
    /// Responses with a parseable toy task behind them.
    pub n: usize,
    /// Responses skipped because the instruction was not a toy task.
    pub skipped: usize,
    pub cosine: f64,
    /// Fraction of responses where both rewards coincide exactly.
    pub match_rate: f64,
    pub self_reward_mean: f64,
    pub rule_reward_mean: f64,
}

/// Scores a triplet log against ground truth derivable from the toy tasks
/// themselves.
pub fn analyze_rewards(records: &[TripletRecord]) -> Result<AgreementReport> {
    let mut self_rewards = Vec::new();
    let mut rule_rewards = Vec::new();
    let mut skipped = 0usize;
    for rec in records {
        match toy::parse_task(&rec.instruction) {
            Some(task) => {
                let gold = rewarding::canonicalize(&task.gold_answer());
                self_rewards.push(rec.reward);
                rule_rewards.push(rewarding::rule_reward(rec.answer.as_deref(), &gold));
            }
            None => skipped += 1,
        }
    }
    if self_rewards.is_empty() {
        return Err(EngineError::Contract(
            "no toy tasks found in the triplet log; reward analysis needs derivable gold answers".into(),
        ));
    }
    let n = self_rewards.len();
    let cosine = reward_agreement(&self_rewards, &rule_rewards)?;
    let matches = self_rewards.iter().zip(&rule_rewards).filter(|(a, b)| a == b).count();
    Ok(AgreementReport {
        n,
        skipped,
        cosine,
        match_rate: matches as f64 / n as f64,
        self_reward_mean: self_rewards.iter().sum::<f64>() / n as f64,
        rule_reward_mean: rule_rewards.iter().sum::<f64>() / n as f64,
    })
}

/// Number of histogram bins in a diversity report.
pub const DIVERSITY_BINS: usize = 20;

/// Similarity profile of generated instructions against the seed pool.
#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub n: usize,
    pub mean_phi: f64,
    pub max_phi: f64,
    /// Counts of per-instruction max similarity in 20 equal bins over [0, 1].
    pub histogram: Vec<usize>,
}

/// Computes each generated instruction's maximum similarity against the seed
/// pool and bins the distribution.
pub fn diversity_report(seed_pool: &[Instruction], generated: &[Instruction]) -> Result<DiversityReport> {
    if generated.is_empty() {
        return Err(EngineError::Contract("diversity report over an empty generated pool".into()));
    }
    let seed_tokens: Vec<(String, textmetrics::TokenSeq)> = seed_pool
        .iter()
        .map(|i| (i.id.clone(), textmetrics::tokenize(&i.text)))
        .collect();
    let mut histogram = vec![0usize; DIVERSITY_BINS];
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for inst in generated {
        let toks = textmetrics::tokenize(&inst.text);
        let (phi, _) = textmetrics::max_pool_similarity(
            &toks,
            seed_tokens.iter().map(|(id, t)| (id.as_str(), t)),
        );
        sum += phi;
        max = max.max(phi);
        let bin = ((phi * DIVERSITY_BINS as f64) as usize).min(DIVERSITY_BINS - 1);
        histogram[bin] += 1;
    }
    Ok(DiversityReport {
        n: generated.len(),
        mean_phi: sum / generated.len() as f64,
        max_phi: max,
        histogram,
    })
}

/// Writes the histogram as CSV (`bin_low,bin_high,count`).
pub fn write_diversity_csv(report: &DiversityReport, path: &Path) -> Result<()> {
    let mut out = String::from("bin_low,bin_high,count\n");
    for (i, count) in report.histogram.iter().enumerate() {
        let lo = i as f64 / DIVERSITY_BINS as f64;
        let hi = (i + 1) as f64 / DIVERSITY_BINS as f64;
        out.push_str(&format!("{lo:.2},{hi:.2},{count}\n"));
    }
    std::fs::write(path, out).map_err(|e| EngineError::io(path.display().to_string(), e))
}
