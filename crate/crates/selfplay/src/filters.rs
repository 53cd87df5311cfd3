//! Online quality filters for candidate instructions, applied in fixed order
//! with the cheapest checks first: banned keywords, token-length bounds,
//! novelty against the instruction pools, then a sampled difficulty probe
//! whose responses double as the training rollouts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{GenerationBackend, GenerationParams};
use crate::config::EngineConfig;
use crate::error::{EngineError, Result};
use crate::rewarding::{self, VoteResult};
use crate::textmetrics::{self, TokenSeq};
use crate::types::{Instruction, ResponseSample};

/// Why a candidate was rejected; `Ok` means it survived every stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Keyword,
    TooShort,
    TooLong,
    Duplicate,
    TooHard,
    TooEasy,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Ok => "ok",
            Verdict::Keyword => "keyword",
            Verdict::TooShort => "too_short",
            Verdict::TooLong => "too_long",
            Verdict::Duplicate => "duplicate",
            Verdict::TooHard => "too_hard",
            Verdict::TooEasy => "too_easy",
        }
    }

    pub fn accepted(self) -> bool {
        self == Verdict::Ok
    }
}

/// Outcome of one candidate's trip through the pipeline. `phi` is the
/// maximum similarity against the pools (0.0 when rejected before the
/// novelty stage); `r_mean` is the probe's mean self-reward (None when the
/// probe never ran).
#[derive(Debug, Clone, Serialize)]
pub struct FilterReport {
    pub verdict: Verdict,
    pub phi: f64,
    pub nearest_id: Option<String>,
    pub r_mean: Option<f64>,
}

/// A filtered candidate plus everything downstream needs: its tokenization
/// (for pool caching) and, when the probe ran, the rewarded responses and
/// the vote behind them.
pub struct FilterOutcome {
    pub report: FilterReport,
    pub tokens: TokenSeq,
    pub probe: Vec<ResponseSample>,
    pub vote: Option<VoteResult>,
}

/// First banned keyword appearing as a whole token, if any.
pub fn keyword_hit<'a>(tokens: &TokenSeq, banned: &'a [String]) -> Option<&'a str> {
    banned
        .iter()
        .find(|k| {
            let k = k.to_lowercase();
            tokens.0.iter().any(|t| *t == k)
        })
        .map(|s| s.as_str())
}

/// Token-length check against the configured inclusive bounds.
pub fn length_verdict(tokens: &TokenSeq, cfg: &EngineConfig) -> Verdict {
    let n = tokens.0.len();
    if n < cfg.min_instruction_tokens {
        Verdict::TooShort
    } else if n > cfg.max_instruction_tokens {
        Verdict::TooLong
    } else {
        Verdict::Ok
    }
}

/// Classifies a probe's mean self-reward against the dual-end difficulty
/// band: below γ_diff is too hard, above γ_easy is too easy, both inclusive.
pub fn difficulty_verdict(r_mean: f64, cfg: &EngineConfig) -> Verdict {
    if r_mean < cfg.gamma_diff {
        Verdict::TooHard
    } else if r_mean > cfg.gamma_easy {
        Verdict::TooEasy
    } else {
        Verdict::Ok
    }
}

/// Runs the difficulty probe: samples `n_vote` responses, extracts and
/// canonicalizes their answers, and scores them by majority vote. An
/// all-unparseable probe counts as maximally hard (mean reward 0).
pub fn difficulty_probe<B: GenerationBackend + ?Sized>(
    backend: &mut B,
    candidate: &Instruction,
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<ResponseSample>, Option<VoteResult>)> {
    let params = GenerationParams::new(cfg.temperature, cfg.gen_max_len);
    let mut probe = backend.sample(candidate, cfg.n_vote, &params, rng)?;
    for s in &mut probe {
        s.answer = rewarding::extract_answer(&s.raw_text);
    }
    let answers: Vec<Option<String>> = probe.iter().map(|s| s.answer.clone()).collect();
    match rewarding::majority_vote(&answers) {
        Ok(vote) => {
            for (s, r) in probe.iter_mut().zip(&vote.rewards) {
                s.reward = Some(*r);
            }
            Ok((probe, Some(vote)))
        }
        Err(EngineError::NoMajority { .. }) => {
            for s in &mut probe {
                s.reward = Some(0.0);
            }
            Ok((probe, None))
        }
        Err(e) => Err(e),
    }
}

/// Runs every stage in order, short-circuiting on the first rejection.
///
/// `pool` must contain the seed pool, the generated pool, and any candidates
/// already accepted in the current step. When `enforce_difficulty` is false
/// the probe still runs (its responses feed training) but its band check
/// cannot reject — except that an all-unparseable probe is still rejected,
/// because such a group has no usable rewards.
pub fn run_pipeline<B: GenerationBackend + ?Sized>(
    candidate: &Instruction,
    pool: &[(&str, &TokenSeq)],
    backend: &mut B,
    cfg: &EngineConfig,
    enforce_difficulty: bool,
    rng: &mut ChaCha8Rng,
) -> Result<FilterOutcome> {
    let tokens = textmetrics::tokenize(&candidate.text);

    let reject = |verdict, tokens, phi, nearest, r_mean| FilterOutcome {
        report: FilterReport { verdict, phi, nearest_id: nearest, r_mean },
        tokens,
        probe: Vec::new(),
        vote: None,
    };

    if keyword_hit(&tokens, &cfg.banned_keywords).is_some() {
        return Ok(reject(Verdict::Keyword, tokens, 0.0, None, None));
    }

    let lv = length_verdict(&tokens, cfg);
    if lv != Verdict::Ok {
        return Ok(reject(lv, tokens, 0.0, None, None));
    }

    let (phi, nearest_id) = textmetrics::max_pool_similarity(&tokens, pool.iter().copied());
    let nearest_id = nearest_id.map(|s| s.to_string());
    if phi > cfg.rouge_threshold {
        return Ok(reject(Verdict::Duplicate, tokens, phi, nearest_id, None));
    }

    let (probe, vote) = difficulty_probe(backend, candidate, cfg, rng)?;
    let r_mean = vote.as_ref().map(|v| v.r_mean).unwrap_or(0.0);
    if vote.is_none() {
        // no parseable answer anywhere: nothing to train on
        return Ok(FilterOutcome {
            report: FilterReport { verdict: Verdict::TooHard, phi, nearest_id, r_mean: Some(0.0) },
            tokens,
            probe,
            vote: None,
        });
    }
    let verdict = if enforce_difficulty { difficulty_verdict(r_mean, cfg) } else { Verdict::Ok };
    Ok(FilterOutcome {
        report: FilterReport { verdict, phi, nearest_id, r_mean: Some(r_mean) },
        tokens,
        probe,
        vote,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendCapabilities, Completion};
    use crate::types::Source;
    use rand::SeedableRng;

    /// Test backend that returns scripted response texts and counts calls.
    struct Scripted {
        answers: Vec<String>,
        sample_calls: usize,
    }

    impl Scripted {
        fn with_rewards(texts: &[&str]) -> Scripted {
            Scripted { answers: texts.iter().map(|s| s.to_string()).collect(), sample_calls: 0 }
        }

        /// n_hit responses answering "7", the rest answering distinct values.
        fn with_agreement(n_hit: usize, n_total: usize) -> Scripted {
            let mut texts = Vec::new();
            for i in 0..n_total {
                if i < n_hit {
                    texts.push("\\boxed{7}".to_string());
                } else {
                    texts.push(format!("\\boxed{{x{i}}}"));
                }
            }
            Scripted { answers: texts, sample_calls: 0 }
        }
    }

    impl GenerationBackend for Scripted {
        fn capabilities(&self) -> BackendCapabilities {
            BackendCapabilities { has_ref_logprobs: true, trainable: false }
        }

        fn complete(&mut self, _: &str, _: &GenerationParams, _: &mut ChaCha8Rng) -> crate::error::Result<Completion> {
            panic!("filters must not call complete")
        }

        fn sample(
            &mut self,
            instruction: &Instruction,
            n: usize,
            _: &GenerationParams,
            _: &mut ChaCha8Rng,
        ) -> crate::error::Result<Vec<ResponseSample>> {
            self.sample_calls += 1;
            Ok((0..n)
                .map(|i| ResponseSample {
                    instruction_id: instruction.id.clone(),
                    tokens: vec!["t".into()],
                    logp_policy: vec![-0.5],
                    logp_ref: vec![-0.5],
                    raw_text: self.answers[i % self.answers.len()].clone(),
                    answer: None,
                    reward: None,
                })
                .collect())
        }
    }

    fn cfg() -> EngineConfig {
        let mut c = EngineConfig::default();
        c.n_vote = 10;
        c
    }

    fn cand(text: &str) -> Instruction {
        Instruction::new("c1", text, Source::Generated, 1)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn keyword_rejection_short_circuits_before_any_sampling() {
        let mut b = Scripted::with_agreement(5, 10);
        let out = run_pipeline(
            &cand("Draw a picture of three apples and count them plus two"),
            &[],
            &mut b,
            &cfg(),
            true,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(out.report.verdict, Verdict::Keyword);
        assert_eq!(out.report.phi, 0.0);
        assert_eq!(out.report.r_mean, None);
        assert!(out.probe.is_empty());
        assert_eq!(b.sample_calls, 0, "rejected candidates must not be probed");
    }

    #[test]
    fn keyword_match_is_whole_token_only() {
        let banned = vec!["graph".to_string()];
        assert!(keyword_hit(&textmetrics::tokenize("study the graph closely"), &banned).is_some());
        assert!(
            keyword_hit(&textmetrics::tokenize("a graphical approach to graphs"), &banned).is_none(),
            "substrings must not match"
        );
    }

    #[test]
    fn length_bounds_are_inclusive() {
        let c = cfg();
        let five = textmetrics::tokenize("one two three four five");
        assert_eq!(length_verdict(&five, &c), Verdict::Ok);
        let four = textmetrics::tokenize("one two three four");
        assert_eq!(length_verdict(&four, &c), Verdict::TooShort);
        let long_text = vec!["word"; 256].join(" ");
        assert_eq!(length_verdict(&textmetrics::tokenize(&long_text), &c), Verdict::Ok);
        let longer_text = vec!["word"; 257].join(" ");
        assert_eq!(length_verdict(&textmetrics::tokenize(&longer_text), &c), Verdict::TooLong);
    }

    #[test]
    fn exact_duplicate_is_rejected_with_phi_one() {
        let mut b = Scripted::with_agreement(5, 10);
        let text = "Compute the sum of seven and nine";
        let toks = textmetrics::tokenize(text);
        let pool = vec![("seed-0001", &toks)];
        let out = run_pipeline(&cand(text), &pool, &mut b, &cfg(), true, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::Duplicate);
        assert!((out.report.phi - 1.0).abs() < 1e-12);
        assert_eq!(out.report.nearest_id.as_deref(), Some("seed-0001"));
        assert_eq!(b.sample_calls, 0);
    }

    #[test]
    fn similarity_at_threshold_passes_strictly_above_fails() {
        // 5-token candidate vs 7-token pool entry sharing an LCS of 3:
        // ROUGE-L F1 = 2·3/(5+7) = 0.5 exactly
        let mut b = Scripted::with_agreement(5, 10);
        let pool_text = "alpha beta gamma zeta eta theta iota";
        let cand_text = "alpha beta gamma delta epsilon";
        let toks = textmetrics::tokenize(pool_text);
        let pool = vec![("seed-0001", &toks)];
        let mut c = cfg();
        c.rouge_threshold = 0.5;
        let out = run_pipeline(&cand(cand_text), &pool, &mut b, &c, true, &mut rng()).unwrap();
        assert_ne!(out.report.verdict, Verdict::Duplicate, "phi == threshold must pass");
        assert!((out.report.phi - 0.5).abs() < 1e-12);
        c.rouge_threshold = 0.49;
        let out = run_pipeline(&cand(cand_text), &pool, &mut b, &c, true, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::Duplicate);
    }

    #[test]
    fn difficulty_band_is_inclusive_on_both_edges() {
        let c = cfg(); // n_vote 10, band [0.2, 0.8]
        for (hits, expect) in [
            (1, Verdict::TooHard),  // r_mean 0.1
            (2, Verdict::Ok),       // 0.2 exactly
            (5, Verdict::Ok),       // 0.5
            (8, Verdict::Ok),       // 0.8 exactly
            (9, Verdict::TooEasy),  // 0.9
        ] {
            let mut b = Scripted::with_agreement(hits, 10);
            let out = run_pipeline(&cand("add five and six then report"), &[], &mut b, &c, true, &mut rng()).unwrap();
            assert_eq!(out.report.verdict, expect, "hits={hits}");
            assert_eq!(out.report.r_mean, Some(hits as f64 / 10.0));
        }
    }

    #[test]
    fn accepted_probe_is_rewarded_and_reusable() {
        let mut b = Scripted::with_agreement(5, 10);
        let out = run_pipeline(&cand("add five and six then report"), &[], &mut b, &cfg(), true, &mut rng()).unwrap();
        assert!(out.report.verdict.accepted());
        assert_eq!(out.probe.len(), 10);
        assert_eq!(b.sample_calls, 1, "probe responses must be reused, not regenerated");
        let vote = out.vote.expect("vote present on acceptance");
        assert_eq!(vote.majority_answer, "7");
        for (s, r) in out.probe.iter().zip(&vote.rewards) {
            assert_eq!(s.reward, Some(*r));
            assert!(s.answer.is_some());
        }
    }

    #[test]
    fn unparseable_probe_counts_as_maximally_hard() {
        let mut b = Scripted::with_rewards(&["no structure here", "still nothing"]);
        let out = run_pipeline(&cand("add five and six then report"), &[], &mut b, &cfg(), true, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::TooHard);
        assert_eq!(out.report.r_mean, Some(0.0));
        assert!(out.vote.is_none());
        assert_eq!(out.probe.len(), 10);
        assert!(out.probe.iter().all(|s| s.reward == Some(0.0) && s.answer.is_none()));
    }

    #[test]
    fn disabled_difficulty_filter_accepts_out_of_band_candidates() {
        let mut b = Scripted::with_agreement(10, 10); // r_mean 1.0, far too easy
        let out = run_pipeline(&cand("add five and six then report"), &[], &mut b, &cfg(), false, &mut rng()).unwrap();
        assert!(out.report.verdict.accepted());
        assert_eq!(out.report.r_mean, Some(1.0));
        assert_eq!(out.probe.len(), 10);
        assert!(out.vote.is_some());
        // but a probe with no parseable answers still rejects
        let mut b = Scripted::with_rewards(&["nothing"]);
        let out = run_pipeline(&cand("add five and six then report"), &[], &mut b, &cfg(), false, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::TooHard);
    }

    #[test]
    fn stage_order_is_keyword_length_novelty_difficulty() {
        // a candidate failing several stages reports the earliest one
        let mut b = Scripted::with_agreement(1, 10);
        let text = "graph it"; // keyword AND too short
        let out = run_pipeline(&cand(text), &[], &mut b, &cfg(), true, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::Keyword);
        // too short AND duplicate: length wins
        let text = "tiny little prompt";
        let toks = textmetrics::tokenize(text);
        let pool = vec![("seed-0001", &toks)];
        let out = run_pipeline(&cand(text), &pool, &mut b, &cfg(), true, &mut rng()).unwrap();
        assert_eq!(out.report.verdict, Verdict::TooShort);
        assert_eq!(out.report.phi, 0.0, "phi is not computed before the novelty stage");
    }
}
