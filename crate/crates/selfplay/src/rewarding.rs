//! Majority-vote self-rewarding: answer extraction from model text, answer
//! canonicalization, and the vote that assigns pseudo-labels and rewards.

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};

/// Last number-like token (optionally signed, with separators/decimals), used
/// as the fallback when no boxed answer exists.
static NUMBER_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"[-+]?\d[\d,]*(?:\.\d+)?").unwrap());

/// Collapsible whitespace runs inside an answer.
static WS_RE: Lazy<Regex> = Lazy::new(|| Regex::new(r"\s+").unwrap());

/// Extracts the final answer from a completion: the content of the last
/// `\boxed{...}` group (brace-balanced), else the last number-like token
/// after the final "answer is". Returns `None` when neither matches.
pub fn extract_answer(text: &str) -> Option<String> {
    if let Some(inner) = last_boxed_group(text) {
        let canon = canonicalize(&inner);
        if !canon.is_empty() {
            return Some(canon);
        }
    }
    let lower = text.to_lowercase();
    if let Some(pos) = lower.rfind("answer is") {
        let tail = &text[pos + "answer is".len()..];
        if let Some(m) = NUMBER_RE.find_iter(tail).last() {
            let canon = canonicalize(m.as_str());
            if !canon.is_empty() {
                return Some(canon);
            }
        }
    }
    None
}

/// Finds the content of the last `\boxed{...}` group by scanning for balanced
/// braces; nested braces are kept intact.
fn last_boxed_group(text: &str) -> Option<String> {
    let marker = "\\boxed{";
    let start = text.rfind(marker)?;
    let inner_start = start + marker.len();
    let mut depth = 1usize;
    let bytes = text.as_bytes();
    let mut i = inner_start;
    while i < bytes.len() {
        match bytes[i] {
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(text[inner_start..i].to_string());
                }
            }
            _ => {}
        }
        i += 1;
    }
    // unbalanced (truncated completion): treat as no usable group
    None
}

/// Canonical answer form: trimmed, internal whitespace collapsed, one
/// trailing period stripped, `\left`/`\right` removed, `\dfrac` → `\frac`.
pub fn canonicalize(raw: &str) -> String {
    let mut s = raw.trim().to_string();
    s = s.replace("\\left", "").replace("\\right", "");
    s = s.replace("\\dfrac", "\\frac");
    s = WS_RE.replace_all(&s, " ").into_owned();
    if let Some(stripped) = s.strip_suffix('.') {
        s = stripped.to_string();
    }
    s.trim().to_string()
}

/// Outcome of a majority vote over one instruction's sampled answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    /// The elected pseudo-label.
    pub majority_answer: String,
    /// Per-sample 0/1 rewards, aligned with the input order.
    pub rewards: Vec<f64>,
    /// Mean reward = majority count / n (the difficulty signal).
    pub r_mean: f64,
    /// Occurrences of the majority answer.
    pub majority_count: usize,
    /// Whether a frequency tie had to be broken.
    pub tie_broken: bool,
}

/// Elects the most frequent canonical answer and scores each sample against
/// it. Frequency ties prefer the shortest answer string, then lexicographic
/// order. Unset answers earn reward 0 and count in the denominator but can
/// never win. All-unset input is a no-majority error.
pub fn majority_vote(answers: &[Option<String>]) -> Result<VoteResult> {
    if answers.is_empty() {
        return Err(EngineError::Contract("majority vote over an empty answer list".into()));
    }
    let mut counts: Vec<(String, usize)> = Vec::new();
    for a in answers.iter().flatten() {
        match counts.iter_mut().find(|(s, _)| s == a) {
            Some((_, c)) => *c += 1,
            None => counts.push((a.clone(), 1)),
        }
    }
    if counts.is_empty() {
        return Err(EngineError::NoMajority { n: answers.len() });
    }
    let max_count = counts.iter().map(|(_, c)| *c).max().unwrap();
    let mut contenders: Vec<&String> =
        counts.iter().filter(|(_, c)| *c == max_count).map(|(s, _)| s).collect();
    let tie_broken = contenders.len() > 1;
    contenders.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let majority_answer = contenders[0].clone();
    let rewards: Vec<f64> = answers
        .iter()
        .map(|a| if a.as_deref() == Some(majority_answer.as_str()) { 1.0 } else { 0.0 })
        .collect();
    let r_mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(VoteResult { majority_answer, rewards, r_mean, majority_count: max_count, tie_broken })
}

/// Exact-match reward of a canonical answer against a canonical gold label.
pub fn rule_reward(answer: Option<&str>, gold: &str) -> f64 {
    match answer {
        Some(a) if a == gold => 1.0,
        _ => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(answers: &[Option<&str>]) -> Result<VoteResult> {
        let owned: Vec<Option<String>> = answers.iter().map(|a| a.map(|s| s.to_string())).collect();
        majority_vote(&owned)
    }

    /// Oracle: count every candidate's exact frequency by scanning the whole
    /// list, then pick the winner by (max count, min length, lexicographic)
    /// using explicit full enumeration rather than the incremental tally.
    fn majority_brute(answers: &[Option<String>]) -> Option<(String, usize)> {
        let set: Vec<&String> = answers.iter().flatten().collect();
        if set.is_empty() {
            return None;
        }
        let mut best: Option<(String, usize)> = None;
        for cand in &set {
            let count = set.iter().filter(|x| x == &cand).count();
            best = match best {
                None => Some(((*cand).clone(), count)),
                Some((b, bc)) => {
                    let better = count > bc
                        || (count == bc
                            && (cand.len() < b.len() || (cand.len() == b.len() && ***cand < *b)));
                    if better { Some(((*cand).clone(), count)) } else { Some((b, bc)) }
                }
            };
        }
        best
    }

    #[test]
    fn boxed_answer_is_extracted_and_canonicalized() {
        assert_eq!(extract_answer("so the result is \\boxed{42}."), Some("42".into()));
        assert_eq!(extract_answer("x \\boxed{\\dfrac{1}{2}} done"), Some("\\frac{1}{2}".into()));
        assert_eq!(
            extract_answer("first \\boxed{1} then \\boxed{2}"),
            Some("2".into()),
            "the last boxed group wins"
        );
    }

    #[test]
    fn nested_braces_stay_balanced() {
        assert_eq!(extract_answer("\\boxed{\\frac{a}{b}}"), Some("\\frac{a}{b}".into()));
    }

    #[test]
    fn truncated_boxed_group_is_unset() {
        assert_eq!(extract_answer("the value is \\boxed{12"), None);
    }

    #[test]
    fn fallback_takes_last_number_after_answer_is() {
        assert_eq!(extract_answer("The answer is 12 or maybe 15"), Some("15".into()));
        assert_eq!(extract_answer("the answer is -3."), Some("-3".into()));
        assert_eq!(extract_answer("no conclusion here"), None);
    }

    #[test]
    fn canonicalization_rules() {
        assert_eq!(canonicalize("  42. "), "42");
        assert_eq!(canonicalize("1  +  1"), "1 + 1");
        assert_eq!(canonicalize("\\left(3, \\frac{\\pi}{2}\\right)"), "(3, \\frac{\\pi}{2})");
        assert_eq!(canonicalize("\\dfrac{1}{2}"), "\\frac{1}{2}");
    }

    #[test]
    fn plain_majority_wins() {
        let v = vote(&[Some("5"), Some("5"), Some("7"), Some("5")]).unwrap();
        assert_eq!(v.majority_answer, "5");
        assert_eq!(v.rewards, vec![1.0, 1.0, 0.0, 1.0]);
        assert!((v.r_mean - 0.75).abs() < 1e-12);
        assert_eq!(v.majority_count, 3);
        assert!(!v.tie_broken);
    }

    #[test]
    fn frequency_tie_prefers_shorter_then_lexicographic() {
        let v = vote(&[Some("10"), Some("10"), Some("7"), Some("7")]).unwrap();
        assert_eq!(v.majority_answer, "7", "shorter string wins the tie");
        assert!(v.tie_broken);

        let v = vote(&[Some("b"), Some("a")]).unwrap();
        assert_eq!(v.majority_answer, "a", "equal length falls back to lexicographic");
        assert!(v.tie_broken);
    }

    #[test]
    fn unset_answers_count_in_denominator_but_never_win() {
        let v = vote(&[None, None, Some("9")]).unwrap();
        assert_eq!(v.majority_answer, "9");
        assert_eq!(v.rewards, vec![0.0, 0.0, 1.0]);
        assert!((v.r_mean - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn all_unset_is_no_majority() {
        assert!(matches!(vote(&[None, None]).unwrap_err(), EngineError::NoMajority { n: 2 }));
    }

    #[test]
    fn single_answer_has_r_mean_one() {
        let v = vote(&[Some("3")]).unwrap();
        assert!((v.r_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn r_mean_is_one_over_n_when_all_distinct() {
        let v = vote(&[Some("1"), Some("2"), Some("3"), Some("4")]).unwrap();
        assert!((v.r_mean - 0.25).abs() < 1e-12);
        assert_eq!(v.majority_answer, "1");
    }

    #[test]
    fn rule_reward_is_exact_string_match() {
        assert_eq!(rule_reward(Some("42"), "42"), 1.0);
        assert_eq!(rule_reward(Some("42.0"), "42"), 0.0);
        assert_eq!(rule_reward(None, "42"), 0.0);
    }

    #[test]
    fn vote_matches_brute_force_on_random_lists() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let alphabet = ["0", "5", "12", "aa", "b"];
        for _ in 0..500 {
            let n = rng.gen_range(1..=8);
            let answers: Vec<Option<String>> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.2) { None } else { Some(alphabet[rng.gen_range(0..alphabet.len())].to_string()) }
                })
                .collect();
            match (majority_vote(&answers), majority_brute(&answers)) {
                (Ok(v), Some((ans, count))) => {
                    assert_eq!(v.majority_answer, ans);
                    assert_eq!(v.majority_count, count);
                }
                (Err(EngineError::NoMajority { .. }), None) => {}
                (got, want) => panic!("mismatch: got {got:?}, want {want:?}"),
            }
        }
    }

    proptest::proptest! {
        /// Permuting the answer list permutes the rewards the same way and
        /// leaves the elected answer and r_mean unchanged.
        #[test]
        fn vote_is_permutation_equivariant(mut answers in proptest::collection::vec(
            proptest::option::of(proptest::sample::select(vec!["0", "1", "22", "b"])), 1..8)) {
            let owned: Vec<Option<String>> = answers.iter().map(|a| a.map(|s| s.to_string())).collect();
            if let Ok(v1) = majority_vote(&owned) {
                answers.rotate_left(1);
                let rotated: Vec<Option<String>> = answers.iter().map(|a| a.map(|s| s.to_string())).collect();
                let v2 = majority_vote(&rotated).unwrap();
                proptest::prop_assert_eq!(&v1.majority_answer, &v2.majority_answer);
                proptest::prop_assert!((v1.r_mean - v2.r_mean).abs() < 1e-12);
                let mut r1 = v1.rewards.clone();
                r1.rotate_left(1);
                proptest::prop_assert_eq!(r1, v2.rewards);
            }
        }
    }
}
