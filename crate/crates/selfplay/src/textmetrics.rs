//! Text similarity primitives: a math-aware tokenizer, longest common
//! subsequence, ROUGE-L F1, and max-similarity lookup against a pool.

use serde::{Deserialize, Serialize};

/// A tokenized text: lowercase fragments with punctuation handled so that
/// math atoms like `2x+1=5` or `\frac{1}{2}` survive as single tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<String>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Characters kept inside fragments that contain a digit or a backslash.
const MATH_CHARS: &[char] = &['+', '-', '*', '/', '=', '^', '_', '{', '}', '\\'];

/// Lowercases, splits on Unicode whitespace, and strips punctuation. Within a
/// whitespace fragment that contains a digit or backslash the math characters
/// above do not split (so formulas stay whole); in plain fragments every
/// non-alphanumeric character is a separator. Empty fragments are dropped.
pub fn tokenize(text: &str) -> TokenSeq {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for fragment in lowered.split_whitespace() {
        let is_math = fragment.chars().any(|c| c.is_ascii_digit() || c == '\\');
        let mut current = String::new();
        for c in fragment.chars() {
            let keep = c.is_alphanumeric() || (is_math && MATH_CHARS.contains(&c));
            if keep {
                current.push(c);
            } else if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    TokenSeq(tokens)
}

/// Longest-common-subsequence length via the two-row dynamic program.
pub fn lcs_len(a: &TokenSeq, b: &TokenSeq) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![0usize; short.len() + 1];
    let mut curr = vec![0usize; short.len() + 1];
    for x in &long.0 {
        for (j, y) in short.0.iter().enumerate() {
            curr[j + 1] = if x == y { prev[j] + 1 } else { curr[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// ROUGE-L F1 between two token sequences: harmonic mean of LCS recall
/// (against `a`) and precision (against `b`). Zero when either side is empty
/// or no common subsequence exists.
pub fn rouge_l(a: &TokenSeq, b: &TokenSeq) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(a, b) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / a.len() as f64;
    let precision = lcs / b.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Maximum ROUGE-L similarity of `text` against a pool of (id, tokens)
/// entries. Ties resolve to the earliest pool entry; an empty pool scores 0
/// with no argmax.
pub fn max_pool_similarity<'a, I>(tokens: &TokenSeq, pool: I) -> (f64, Option<String>)
where
    I: IntoIterator<Item = (&'a str, &'a TokenSeq)>,
{
    let mut best = 0.0f64;
    let mut best_id: Option<String> = None;
    for (id, other) in pool {
        let score = rouge_l(tokens, other);
        if best_id.is_none() || score > best {
            best = score;
            best_id = Some(id.to_string());
        }
    }
    match best_id {
        Some(id) => (best, Some(id)),
        None => (0.0, None),
    }
}
