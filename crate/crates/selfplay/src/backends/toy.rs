//! A self-contained toy environment: arithmetic word tasks and a trainable
//! tabular softmax policy over two-token responses (a reasoning-style token,
//! then an answer token). It is deliberately structured so that greedy
//! decoding and sampled consensus can disagree, policy updates generalize
//! through a shared per-bucket answer bias, and a "trap" initialization can
//! reproduce consensus-on-wrong-answer reward hacking at desk scale.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendCapabilities, Completion, GenerationBackend, GenerationParams, UpdateStats};
use crate::config::{Algorithm, EngineConfig};
use crate::error::{EngineError, Result};
use crate::rlcore;
use crate::types::{Instruction, ResponseSample, RewardedTriplet};

/// Operand range for toy tasks (inclusive).
pub const OPERAND_MAX: i64 = 20;
/// Number of difficulty buckets.
pub const N_BUCKETS: usize = 5;
/// The reasoning-style tokens a response can open with.
pub const STYLES: [&str; 4] = ["direct", "stepwise", "verify", "guess"];
/// The distinguished wrong answer the trap initialization favors.
pub const TRAP_TOKEN: &str = "0";
/// Answer vocabulary size (most frequent correct answers plus the trap token).
pub const VOCAB_TOP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub fn word(self) -> &'static str {
        match self {
            Op::Add => "plus",
            Op::Sub => "minus",
            Op::Mul => "times",
        }
    }

    fn from_word(w: &str) -> Option<Op> {
        match w {
            "plus" => Some(Op::Add),
            "minus" => Some(Op::Sub),
            "times" => Some(Op::Mul),
            _ => None,
        }
    }

    fn weight(self) -> usize {
        match self {
            Op::Add => 0,
            Op::Sub => 1,
            Op::Mul => 2,
        }
    }
}

/// One arithmetic task. The difficulty bucket is a deterministic function of
/// the operator and operand magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ToyTask {
    pub op: Op,
    pub a: i64,
    pub b: i64,
}

impl ToyTask {
    pub fn new(op: Op, a: i64, b: i64) -> ToyTask {
        ToyTask { op, a, b }
    }

    pub fn gold_answer(&self) -> String {
        match self.op {
            Op::Add => (self.a + self.b).to_string(),
            Op::Sub => (self.a - self.b).to_string(),
            Op::Mul => (self.a * self.b).to_string(),
        }
    }

    /// Bucket 0 (easiest) .. 4 (hardest): operator weight plus a magnitude
    /// class of the larger operand (≥ 14 → 2, ≥ 7 → 1, else 0).
    pub fn difficulty_bucket(&self) -> usize {
        let m = self.a.max(self.b);
        let mag = if m >= 14 { 2 } else if m >= 7 { 1 } else { 0 };
        (self.op.weight() + mag).min(N_BUCKETS - 1)
    }

    /// Stable map key, e.g. `12*7`.
    pub fn key(&self) -> String {
        let sym = match self.op {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        };
        format!("{}{}{}", self.a, sym, self.b)
    }

    /// Renders the instruction text; the surface template rotates with the
    /// task so the pool stays lexically diverse.
    pub fn render(&self) -> String {
        let (a, op, b) = (self.a, self.op.word(), self.b);
        match mix2(self.seed(), 0xA11CE) % 4 {
            0 => format!("Task: compute {a} {op} {b}."),
            1 => format!("Find the value of {a} {op} {b}."),
            2 => format!("What is {a} {op} {b} in total?"),
            _ => format!("Calculate the result of {a} {op} {b}."),
        }
    }

    fn seed(&self) -> u64 {
        mix2(mix2(self.a as u64, self.b as u64), self.op.weight() as u64)
    }
}

/// Finds `<int> <plus|minus|times> <int>` (operands in range) in free text.
pub fn parse_task(text: &str) -> Option<ToyTask> {
    let words: Vec<String> = text
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric() && c != '-').to_lowercase())
        .collect();
    for i in 0..words.len().saturating_sub(2) {
        if let (Ok(a), Some(op), Ok(b)) =
            (words[i].parse::<i64>(), Op::from_word(&words[i + 1]), words[i + 2].parse::<i64>())
        {
            if (0..=OPERAND_MAX).contains(&a) && (0..=OPERAND_MAX).contains(&b) {
                return Some(ToyTask::new(op, a, b));
            }
        }
    }
    None
}

/// Every task in the space, in deterministic order.
pub fn all_tasks() -> Vec<ToyTask> {
    let mut out = Vec::new();
    for op in [Op::Add, Op::Sub, Op::Mul] {
        for a in 0..=OPERAND_MAX {
            for b in 0..=OPERAND_MAX {
                out.push(ToyTask::new(op, a, b));
            }
        }
    }
    out
}

/// splitmix64: a small, stable hash used for all deterministic per-task
/// structure (template choice, class assignment, logit jitter).
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn mix2(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

/// Uniform f64 in [0, 1) from a hash.
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Answer vocabulary: the most frequent correct answers over the whole task
/// space plus the distinguished trap token.
#[derive(Debug, Clone)]
pub struct ToyVocab {
    pub tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    pub trap_index: usize,
}

impl ToyVocab {
    pub fn build() -> ToyVocab {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in all_tasks() {
            *freq.entry(t.gold_answer()).or_insert(0) += 1;
        }
        let mut ranked: Vec<(String, usize)> =
            freq.into_iter().filter(|(s, _)| s != TRAP_TOKEN).collect();
        // frequency descending, then numeric value for a stable order
        ranked.sort_by(|x, y| {
            y.1.cmp(&x.1).then_with(|| {
                let (xv, yv) = (x.0.parse::<i64>().unwrap_or(0), y.0.parse::<i64>().unwrap_or(0));
                xv.cmp(&yv)
            })
        });
        let mut tokens: Vec<String> = vec![TRAP_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(VOCAB_TOP).map(|(s, _)| s));
        let index = tokens.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        ToyVocab { tokens, index, trap_index: 0 }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn position(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }
}

/// Behavioral class a task's initialization falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskClass {
    /// The most likely style leads to a distractor; consensus still finds gold.
    Tricky,
    /// Every style favors gold.
    Solid,
    /// Near-uniform answers: no consensus to be had.
    Scatter,
    /// Hardest-bucket trap initialization (trap mode only).
    Trap,
}

/// Tunable structure of the toy policy initialization and update scaling.
/// Defaults favor a visible consensus→greedy conversion; the reward-hacking
/// reproduction uses its own settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyParams {
    /// Hardest-bucket tasks start with `trap_mass` on the trap token.
    pub trap: bool,
    pub trap_mass: f64,
    /// Runner-up mass under trap init (on gold where in vocabulary).
    pub trap_runner_mass: f64,
    pub frac_tricky: f64,
    pub frac_solid: f64,
    /// P(distractor | style 0) for tricky tasks.
    pub tricky_bad_distractor: f64,
    /// P(gold | style 0) for tricky tasks.
    pub tricky_bad_gold: f64,
    /// P(gold | styles 1..3) for tricky tasks.
    pub tricky_good_gold: f64,
    /// P(distractor | styles 1..3) for tricky tasks.
    pub tricky_good_distractor: f64,
    /// P(gold | any style) for solid tasks.
    pub solid_gold: f64,
    /// Initial style distribution before jitter.
    pub style_probs: [f64; 4],
    /// Logit jitter half-width on style rows.
    pub style_jitter: f64,
    /// Logit jitter half-width on scatter-class answer rows.
    pub scatter_jitter: f64,
    /// Learning-rate multiplier for style rows.
    pub style_lr_scale: f64,
    /// Learning-rate multiplier for the shared per-bucket answer bias.
    pub bias_lr_scale: f64,
    /// Salt for class assignment and jitter.
    pub init_seed: u64,
}

impl Default for ToyParams {
    fn default() -> Self {
        ToyParams {
            trap: false,
            trap_mass: 0.60,
            trap_runner_mass: 0.22,
            frac_tricky: 0.45,
            frac_solid: 0.30,
            tricky_bad_distractor: 0.55,
            tricky_bad_gold: 0.10,
            tricky_good_gold: 0.70,
            tricky_good_distractor: 0.05,
            solid_gold: 0.55,
            style_probs: [0.35, 0.30, 0.20, 0.15],
            style_jitter: 0.05,
            scatter_jitter: 0.20,
            style_lr_scale: 1.0,
            bias_lr_scale: 1.0,
            init_seed: 0,
        }
    }
}

/// Identifies one logit row of the policy table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RowRef {
    /// Style logits of one task (4 entries).
    Style(String),
    /// Answer logits of one (task, style) context (vocabulary-sized).
    Answer(String, usize),
    /// Shared answer bias of one difficulty bucket (vocabulary-sized).
    Bias(usize),
}

impl RowRef {
    fn lr_scale(&self, p: &ToyParams) -> f64 {
        match self {
            RowRef::Style(_) => p.style_lr_scale,
            RowRef::Answer(..) => 1.0,
            RowRef::Bias(_) => p.bias_lr_scale,
        }
    }
}

/// Tabular softmax policy: current rows start at a deterministic
/// initialization (which doubles as the frozen reference policy) and move
/// only through `update`.
pub struct ToyBackend {
    pub params: ToyParams,
    vocab: ToyVocab,
    /// Rows that have been touched by training; untouched rows equal init.
    rows: BTreeMap<RowRef, Vec<f64>>,
}

impl ToyBackend {
    pub fn new(params: ToyParams) -> ToyBackend {
        ToyBackend { params, vocab: ToyVocab::build(), rows: BTreeMap::new() }
    }

    pub fn vocab(&self) -> &ToyVocab {
        &self.vocab
    }

    /// Deterministic class of a task under these parameters.
    pub fn class_of(&self, task: &ToyTask) -> TaskClass {
        if task.difficulty_bucket() == N_BUCKETS - 1 {
            return if self.params.trap { TaskClass::Trap } else { TaskClass::Scatter };
        }
        if self.vocab.position(&task.gold_answer()).is_none() {
            return TaskClass::Scatter;
        }
        let u = unit(mix2(task.seed(), splitmix(self.params.init_seed ^ 0xC1A55)));
        if u < self.params.frac_tricky {
            TaskClass::Tricky
        } else if u < self.params.frac_tricky + self.params.frac_solid {
            TaskClass::Solid
        } else {
            TaskClass::Scatter
        }
    }

    /// Deterministic wrong-answer index for a task (never the trap token and
    /// never gold).
    fn distractor_index(&self, task: &ToyTask) -> usize {
        let gold = self.vocab.position(&task.gold_answer());
        let n = self.vocab.len();
        let mut idx = 1 + (mix2(task.seed(), splitmix(self.params.init_seed ^ 0xD157)) as usize) % (n - 1);
        while Some(idx) == gold {
            idx = 1 + (idx % (n - 1));
        }
        idx
    }

    /// Frozen initial logits for a row; this is also the reference policy.
    pub fn init_row(&self, row: &RowRef) -> Vec<f64> {
        match row {
            RowRef::Bias(_) => vec![0.0; self.vocab.len()],
            RowRef::Style(task_key) => {
                let task = parse_key(task_key).expect("style row key must be a task key");
                let jitter_seed = mix2(task.seed(), splitmix(self.params.init_seed ^ 0x57E1E));
                self.params
                    .style_probs
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let j = unit(mix2(jitter_seed, i as u64)) * 2.0 - 1.0;
                        p.max(1e-9).ln() + j * self.params.style_jitter
                    })
                    .collect()
            }
            RowRef::Answer(task_key, style) => {
                let task = parse_key(task_key).expect("answer row key must be a task key");
                self.init_answer_row(&task, *style)
            }
        }
    }

    fn init_answer_row(&self, task: &ToyTask, style: usize) -> Vec<f64> {
        let p = &self.params;
        let n = self.vocab.len();
        let gold = self.vocab.position(&task.gold_answer());
        let class = self.class_of(task);
        let mut probs = vec![0.0f64; n];
        match class {
            TaskClass::Trap => {
                // trap mass on token "0" regardless of the task; runner-up
                // mass on gold (or a fixed distractor when gold is out of
                // vocabulary or *is* the trap token); the rest spread evenly
                let runner = match gold {
                    Some(g) if g != self.vocab.trap_index => g,
                    _ => self.distractor_index(task),
                };
                let rest = (1.0 - p.trap_mass - p.trap_runner_mass).max(0.0) / (n - 2) as f64;
                for pr in probs.iter_mut() {
                    *pr = rest;
                }
                probs[self.vocab.trap_index] = p.trap_mass;
                probs[runner] = p.trap_runner_mass;
                if gold == Some(self.vocab.trap_index) {
                    // gold coincides with the trap token: merge the masses
                    probs[self.vocab.trap_index] = p.trap_mass + p.trap_runner_mass;
                    probs[runner] = rest;
                }
            }
            TaskClass::Tricky => {
                let g = gold.expect("tricky tasks have in-vocab gold");
                let d = self.distractor_index(task);
                let (pg, pd) = if style == 0 {
                    (p.tricky_bad_gold, p.tricky_bad_distractor)
                } else {
                    (p.tricky_good_gold, p.tricky_good_distractor)
                };
                let rest = (1.0 - pg - pd).max(0.0) / (n - 2) as f64;
                for pr in probs.iter_mut() {
                    *pr = rest;
                }
                probs[g] = pg;
                probs[d] = pd;
            }
            TaskClass::Solid => {
                let g = gold.expect("solid tasks have in-vocab gold");
                let rest = (1.0 - p.solid_gold).max(0.0) / (n - 1) as f64;
                for pr in probs.iter_mut() {
                    *pr = rest;
                }
                probs[g] = p.solid_gold;
            }
            TaskClass::Scatter => {
                let seed = mix2(mix2(task.seed(), style as u64), splitmix(p.init_seed ^ 0x5CA77E7));
                let base = 1.0 / n as f64;
                for (i, pr) in probs.iter_mut().enumerate() {
                    let j = unit(mix2(seed, i as u64)) * 2.0 - 1.0;
                    *pr = base * (j * p.scatter_jitter).exp();
                }
            }
        }
        probs.iter().map(|pr| pr.max(1e-12).ln()).collect()
    }

    /// Current logits for a row (init plus any training movement).
    pub fn row(&self, row: &RowRef) -> Vec<f64> {
        match self.rows.get(row) {
            Some(r) => r.clone(),
            None => self.init_row(row),
        }
    }

    /// Nudges one logit (testing hook for finite-difference checks).
    pub fn nudge(&mut self, row: &RowRef, idx: usize, delta: f64) {
        let mut r = self.row(row);
        r[idx] += delta;
        self.rows.insert(row.clone(), r);
    }

    /// Combined answer logits for (task, style): per-context row plus the
    /// shared bucket bias.
    fn answer_logits(&self, task: &ToyTask, style: usize, reference: bool) -> Vec<f64> {
        let row_ref = RowRef::Answer(task.key(), style);
        let bias_ref = RowRef::Bias(task.difficulty_bucket());
        let (row, bias) = if reference {
            (self.init_row(&row_ref), self.init_row(&bias_ref))
        } else {
            (self.row(&row_ref), self.row(&bias_ref))
        };
        row.iter().zip(&bias).map(|(a, b)| a + b).collect()
    }

    fn style_logits(&self, task: &ToyTask, reference: bool) -> Vec<f64> {
        let r = RowRef::Style(task.key());
        if reference { self.init_row(&r) } else { self.row(&r) }
    }

    /// Marginal answer distribution at unit temperature (diagnostics).
    pub fn answer_marginal(&self, task: &ToyTask) -> Vec<f64> {
        let styles = softmax(&self.style_logits(task, false), 1.0);
        let mut out = vec![0.0; self.vocab.len()];
        for (s, ps) in styles.iter().enumerate() {
            let ans = softmax(&self.answer_logits(task, s, false), 1.0);
            for (o, a) in out.iter_mut().zip(&ans) {
                *o += ps * a;
            }
        }
        out
    }

    fn parse_instruction(&self, instruction: &Instruction) -> Result<ToyTask> {
        parse_task(&instruction.text).ok_or_else(|| EngineError::TaskParse(instruction.text.clone()))
    }

    fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let x: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if x < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    /// Chooses a token index: categorical at positive temperature, argmax
    /// (lowest index winning ties) at zero.
    fn pick(logits: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
        if temperature <= 0.0 {
            argmax(logits)
        } else {
            Self::sample_index(&softmax(logits, temperature), rng)
        }
    }

    /// One response: style token then answer token, with log-probs under the
    /// sampling policy and the frozen reference. Greedy decoding is
    /// deterministic, so both log-probs are zero there.
    fn sample_one(
        &self,
        task: &ToyTask,
        instruction_id: &str,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> ResponseSample {
        let style_logits = self.style_logits(task, false);
        let style_idx = Self::pick(&style_logits, temperature, rng);
        let ans_logits = self.answer_logits(task, style_idx, false);
        let ans_idx = Self::pick(&ans_logits, temperature, rng);

        let (logp_policy, logp_ref) = if temperature > 0.0 {
            let lp_style = log_softmax(&style_logits, temperature)[style_idx];
            let lp_ans = log_softmax(&ans_logits, temperature)[ans_idx];
            let ref_style = log_softmax(&self.style_logits(task, true), temperature)[style_idx];
            let ref_ans = log_softmax(&self.answer_logits(task, style_idx, true), temperature)[ans_idx];
            (vec![lp_style.min(0.0), lp_ans.min(0.0)], vec![ref_style.min(0.0), ref_ans.min(0.0)])
        } else {
            (vec![0.0, 0.0], vec![0.0, 0.0])
        };

        let style = STYLES[style_idx];
        let answer = &self.vocab.tokens[ans_idx];
        ResponseSample {
            instruction_id: instruction_id.to_string(),
            tokens: vec![style.to_string(), answer.clone()],
            logp_policy,
            logp_ref,
            raw_text: format!("Reasoning: {style}. The final answer is: \\boxed{{{answer}}}"),
            answer: None,
            reward: None,
        }
    }

    /// Rows touched by a batch (for gradient checks).
    pub fn touched_rows(&self, batch: &[RewardedTriplet]) -> Result<Vec<RowRef>> {
        let mut out = std::collections::BTreeSet::new();
        for t in batch {
            let task = self.parse_instruction(&t.instruction)?;
            let style = style_index(&t.response.tokens[0])?;
            out.insert(RowRef::Style(task.key()));
            out.insert(RowRef::Answer(task.key(), style));
            out.insert(RowRef::Bias(task.difficulty_bucket()));
        }
        Ok(out.into_iter().collect())
    }

    /// Training loss of a batch under the current table: mean clipped
    /// surrogate, plus the k3 KL penalty term under the group-normalized
    /// algorithm (where KL enters the loss rather than the reward).
    pub fn loss_on(&self, batch: &[RewardedTriplet], cfg: &EngineConfig) -> Result<f64> {
        let mut new = Vec::with_capacity(batch.len());
        let mut old = Vec::with_capacity(batch.len());
        let mut adv = Vec::with_capacity(batch.len());
        let mut kl_sum = 0.0;
        let mut kl_n = 0usize;
        for t in batch {
            let (lp_new, lp_ref) = self.token_logps(t, cfg)?;
            if cfg.algorithm == Algorithm::Grpo {
                for (n, r) in lp_new.iter().zip(&lp_ref) {
                    kl_sum += rlcore::kl_k3(&[n - r])[0];
                    kl_n += 1;
                }
            }
            new.push(lp_new);
            old.push(t.response.logp_policy.clone());
            adv.push(t.advantages.clone());
        }
        let mut loss = rlcore::clipped_loss_batch(&new, &old, &adv, cfg.clip_eps)?;
        if cfg.algorithm == Algorithm::Grpo && kl_n > 0 {
            loss += cfg.kl_coef * kl_sum / kl_n as f64;
        }
        Ok(loss)
    }

    /// Log-probs of a stored response's tokens under the current and the
    /// reference table, at the configured temperature.
    fn token_logps(&self, t: &RewardedTriplet, cfg: &EngineConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let task = self.parse_instruction(&t.instruction)?;
        let style = style_index(&t.response.tokens[0])?;
        let ans = self
            .vocab
            .position(&t.response.tokens[1])
            .ok_or_else(|| EngineError::Contract(format!("answer token {:?} not in vocabulary", t.response.tokens[1])))?;
        let temp = if cfg.temperature > 0.0 { cfg.temperature } else { 1.0 };
        let new_style = log_softmax(&self.style_logits(&task, false), temp);
        let new_ans = log_softmax(&self.answer_logits(&task, style, false), temp);
        let ref_style = log_softmax(&self.style_logits(&task, true), temp);
        let ref_ans = log_softmax(&self.answer_logits(&task, style, true), temp);
        Ok((vec![new_style[style], new_ans[ans]], vec![ref_style[style], ref_ans[ans]]))
    }

    /// Analytic gradient of `loss_on` with respect to every touched row's
    /// logits (descent direction is the negative of this).
    pub fn gradient_on(&self, batch: &[RewardedTriplet], cfg: &EngineConfig) -> Result<BTreeMap<RowRef, Vec<f64>>> {
        let mut grads: BTreeMap<RowRef, Vec<f64>> = BTreeMap::new();
        let bsz = batch.len() as f64;
        let temp = if cfg.temperature > 0.0 { cfg.temperature } else { 1.0 };
        let grpo_tokens = if cfg.algorithm == Algorithm::Grpo { (batch.len() * 2) as f64 } else { 0.0 };

        for t in batch {
            let task = self.parse_instruction(&t.instruction)?;
            let style = style_index(&t.response.tokens[0])?;
            let ans = self
                .vocab
                .position(&t.response.tokens[1])
                .ok_or_else(|| EngineError::Contract(format!("answer token {:?} not in vocabulary", t.response.tokens[1])))?;
            let y = t.response.tokens.len() as f64;

            let style_logits = self.style_logits(&task, false);
            let ans_logits = self.answer_logits(&task, style, false);
            let style_p = softmax(&style_logits, temp);
            let ans_p = softmax(&ans_logits, temp);
            let lp_new = [log_softmax(&style_logits, temp)[style], log_softmax(&ans_logits, temp)[ans]];
            let lp_ref = {
                let rs = log_softmax(&self.style_logits(&task, true), temp);
                let ra = log_softmax(&self.answer_logits(&task, style, true), temp);
                [rs[style], ra[ans]]
            };

            for (tok, chosen) in [style, ans].into_iter().enumerate() {
                let lpn = lp_new[tok];
                let lpo = t.response.logp_policy[tok];
                let a = t.advantages[tok];
                let ratio = (lpn - lpo).exp();
                let clamped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                // d objective / d lp_new: ratio·Â when the unclipped branch is
                // the active min, zero when the clipped branch is
                let unclipped_active = ratio * a <= clamped * a;
                let mut dl_dlp = if unclipped_active { -(ratio * a) / (y * bsz) } else { 0.0 };
                if cfg.algorithm == Algorithm::Grpo {
                    // d k3 / d lp_new = 1 − exp(−(lp_new − lp_ref))
                    dl_dlp += cfg.kl_coef * (1.0 - (-(lpn - lp_ref[tok])).exp()) / grpo_tokens;
                }
                let (row_ref, probs, chosen_idx) = if tok == 0 {
                    (RowRef::Style(task.key()), &style_p, chosen)
                } else {
                    (RowRef::Answer(task.key(), style), &ans_p, chosen)
                };
                let entry = grads.entry(row_ref).or_insert_with(|| vec![0.0; probs.len()]);
                for (j, g) in entry.iter_mut().enumerate() {
                    let indicator = if j == chosen_idx { 1.0 } else { 0.0 };
                    *g += dl_dlp * (indicator - probs[j]) / temp;
                }
                if tok == 1 {
                    // the shared bucket bias adds into the answer logits, so
                    // it receives the same gradient
                    let entry = grads
                        .entry(RowRef::Bias(task.difficulty_bucket()))
                        .or_insert_with(|| vec![0.0; ans_p.len()]);
                    for (j, g) in entry.iter_mut().enumerate() {
                        let indicator = if j == chosen_idx { 1.0 } else { 0.0 };
                        *g += dl_dlp * (indicator - ans_p[j]) / temp;
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn style_index(token: &str) -> Result<usize> {
    STYLES
        .iter()
        .position(|s| *s == token)
        .ok_or_else(|| EngineError::Contract(format!("unknown style token {token:?}")))
}

fn parse_key(key: &str) -> Option<ToyTask> {
    for (sym, op) in [('+', Op::Add), ('-', Op::Sub), ('*', Op::Mul)] {
        if let Some(pos) = key.find(sym) {
            let (a, b) = (key[..pos].parse().ok()?, key[pos + 1..].parse().ok()?);
            return Some(ToyTask::new(op, a, b));
        }
    }
    None
}

pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-12);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| ((l - m) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-12);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|l| ((l - m) / t).exp()).sum::<f64>().ln();
    logits.iter().map(|l| (l - m) / t - log_sum).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl GenerationBackend for ToyBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { has_ref_logprobs: true, trainable: true }
    }

    /// Toy instruction synthesis: parse the prompt's task examples, then emit
    /// two fresh tasks by mutating operands (and occasionally the operator)
    /// of randomly chosen examples.
    fn complete(&mut self, prompt: &str, _params: &GenerationParams, rng: &mut ChaCha8Rng) -> Result<Completion> {
        let examples: Vec<ToyTask> = prompt
            .lines()
            .filter(|l| l.trim_start().starts_with("Task "))
            .filter_map(parse_task)
            .collect();
        if examples.is_empty() {
            return Ok(Completion { text: String::new(), truncated: false });
        }
        let next_number = prompt
            .lines()
            .rev()
            .find_map(|l| {
                let rest = l.trim().strip_prefix("Task ")?;
                rest.split(':').next()?.trim().parse::<usize>().ok()
            })
            .unwrap_or(9);

        let mut texts = Vec::new();
        for _ in 0..2 {
            let base = examples[rng.gen_range(0..examples.len())];
            let op = if rng.gen_bool(0.1) {
                [Op::Add, Op::Sub, Op::Mul][rng.gen_range(0..3)]
            } else {
                base.op
            };
            let task = ToyTask::new(op, rng.gen_range(0..=OPERAND_MAX), rng.gen_range(0..=OPERAND_MAX));
            texts.push(task.render());
        }
        let text = format!("{}\nTask {}: {}", texts[0], next_number + 1, texts[1]);
        Ok(Completion { text, truncated: false })
    }

    fn sample(
        &mut self,
        instruction: &Instruction,
        n: usize,
        params: &GenerationParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ResponseSample>> {
        let task = self.parse_instruction(instruction)?;
        Ok((0..n).map(|_| self.sample_one(&task, &instruction.id, params.temperature, rng)).collect())
    }

    /// One plain gradient-descent step on the batch loss, with per-row-kind
    /// learning-rate scaling.
    fn update(&mut self, batch: &[RewardedTriplet], cfg: &EngineConfig) -> Result<UpdateStats> {
        if batch.is_empty() {
            return Err(EngineError::DegenerateBatch("empty update batch".into()));
        }
        for t in batch {
            t.validate()?;
        }
        let loss = self.loss_on(batch, cfg)?;
        let grads = self.gradient_on(batch, cfg)?;
        let mut grad_norm_sq = 0.0;
        for (row_ref, grad) in &grads {
            grad_norm_sq += grad.iter().map(|g| g * g).sum::<f64>();
            let lr = cfg.actor_lr * row_ref.lr_scale(&self.params);
            let mut row = self.row(row_ref);
            for (r, g) in row.iter_mut().zip(grad) {
                *r -= lr * g;
            }
            self.rows.insert(row_ref.clone(), row);
        }
        let mean_reward = batch.iter().map(|t| t.reward).sum::<f64>() / batch.len() as f64;
        let mut kl_sum = 0.0;
        let mut kl_n = 0usize;
        for t in batch {
            for k in rlcore::kl_k1(&t.response.log_ratios()) {
                kl_sum += k;
                kl_n += 1;
            }
        }
        Ok(UpdateStats {
            loss,
            grad_norm: grad_norm_sq.sqrt(),
            mean_reward,
            mean_kl: if kl_n > 0 { kl_sum / kl_n as f64 } else { 0.0 },
        })
    }

    fn checkpoint(&self) -> Result<serde_json::Value> {
        let rows: BTreeMap<String, &Vec<f64>> =
            self.rows.iter().map(|(k, v)| (serde_json::to_string(k).unwrap(), v)).collect();
        serde_json::to_value(serde_json::json!({
            "kind": "toy",
            "params": self.params,
            "rows": rows,
        }))
        .map_err(|e| EngineError::Checkpoint(e.to_string()))
    }

    fn restore(&mut self, snapshot: &serde_json::Value) -> Result<()> {
        let kind = snapshot.get("kind").and_then(|v| v.as_str());
        if kind != Some("toy") {
            return Err(EngineError::Checkpoint(format!("expected a toy policy snapshot, got {kind:?}")));
        }
        let params: ToyParams = serde_json::from_value(snapshot["params"].clone())
            .map_err(|e| EngineError::Checkpoint(format!("bad params: {e}")))?;
        let raw: BTreeMap<String, Vec<f64>> = serde_json::from_value(snapshot["rows"].clone())
            .map_err(|e| EngineError::Checkpoint(format!("bad rows: {e}")))?;
        let mut rows = BTreeMap::new();
        for (k, v) in raw {
            let row_ref: RowRef = serde_json::from_str(&k)
                .map_err(|e| EngineError::Checkpoint(format!("bad row key {k:?}: {e}")))?;
            rows.insert(row_ref, v);
        }
        self.params = params;
        self.rows = rows;
        Ok(())
    }
}

/// Builds a toy seed dataset: `n` distinct tasks rendered as instruction
/// lines, with `bucket4_frac` of them drawn from the hardest bucket.
pub fn generate_seed_instructions(n: usize, bucket4_frac: f64, rng: &mut ChaCha8Rng) -> Vec<String> {
    let all = all_tasks();
    let hard: Vec<&ToyTask> = all.iter().filter(|t| t.difficulty_bucket() == N_BUCKETS - 1).collect();
    let easy: Vec<&ToyTask> = all.iter().filter(|t| t.difficulty_bucket() != N_BUCKETS - 1).collect();
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut guard = 0;
    while out.len() < n && guard < n * 100 {
        guard += 1;
        let task = if rng.gen_bool(bucket4_frac.clamp(0.0, 1.0)) {
            hard[rng.gen_range(0..hard.len())]
        } else {
            easy[rng.gen_range(0..easy.len())]
        };
        if seen.insert(task.key()) {
            out.push(task.render());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Source;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn inst(task: &ToyTask) -> Instruction {
        Instruction::new(format!("t-{}", task.key()), task.render(), Source::Generated, 1)
    }

    #[test]
    fn gold_answers_and_buckets() {
        assert_eq!(ToyTask::new(Op::Add, 2, 3).gold_answer(), "5");
        assert_eq!(ToyTask::new(Op::Sub, 2, 9).gold_answer(), "-7");
        assert_eq!(ToyTask::new(Op::Mul, 6, 7).gold_answer(), "42");
        assert_eq!(ToyTask::new(Op::Add, 1, 2).difficulty_bucket(), 0);
        assert_eq!(ToyTask::new(Op::Mul, 20, 17).difficulty_bucket(), 4);
        assert_eq!(ToyTask::new(Op::Sub, 8, 3).difficulty_bucket(), 2);
        for t in all_tasks() {
            assert!(t.difficulty_bucket() < N_BUCKETS);
        }
    }

    #[test]
    fn render_and_parse_round_trip() {
        let mut r = rng(1);
        for _ in 0..200 {
            let t = ToyTask::new(
                [Op::Add, Op::Sub, Op::Mul][r.gen_range(0..3)],
                r.gen_range(0..=OPERAND_MAX),
                r.gen_range(0..=OPERAND_MAX),
            );
            let parsed = parse_task(&t.render()).expect("rendered task must parse");
            assert_eq!(parsed, t);
        }
        assert_eq!(parse_task("What is 12 times 3 in total?"), Some(ToyTask::new(Op::Mul, 12, 3)));
        assert_eq!(parse_task("describe a picture of a graph"), None);
        assert_eq!(parse_task("compute 50 plus 3"), None, "out-of-range operands rejected");
    }

    #[test]
    fn vocabulary_has_trap_token_and_top_answers() {
        let v = ToyVocab::build();
        assert_eq!(v.len(), VOCAB_TOP + 1);
        assert_eq!(v.tokens[v.trap_index], TRAP_TOKEN);
        // small sums are among the most frequent correct answers
        assert!(v.position("5").is_some());
        assert!(v.position("12").is_some());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let b = ToyBackend::new(ToyParams::default());
        let mut checked = 0;
        for t in all_tasks().iter().step_by(37) {
            let probs = softmax(&b.row(&RowRef::Style(t.key())), 1.0);
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for s in 0..STYLES.len() {
                let probs = softmax(&b.answer_logits(t, s, false), 1.0);
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            checked += 1;
        }
        assert!(checked > 20);
    }

    #[test]
    fn reference_rows_are_frozen_under_updates() {
        let params = ToyParams::default();
        let mut b = ToyBackend::new(params);
        let task = all_tasks().into_iter().find(|t| b.class_of(t) == TaskClass::Solid).unwrap();
        let row_ref = RowRef::Answer(task.key(), 0);
        let before = b.init_row(&row_ref);
        // touch the current row
        b.nudge(&row_ref, 1, 0.5);
        let after = b.init_row(&row_ref);
        assert_eq!(before, after, "reference logits must be bitwise stable");
        assert_ne!(b.row(&row_ref), after);
    }

    #[test]
    fn sampling_is_deterministic_given_rng() {
        let mut b1 = ToyBackend::new(ToyParams::default());
        let mut b2 = ToyBackend::new(ToyParams::default());
        let task = ToyTask::new(Op::Add, 3, 4);
        let i = inst(&task);
        let p = GenerationParams::new(1.0, 8);
        let s1 = b1.sample(&i, 16, &p, &mut rng(42)).unwrap();
        let s2 = b2.sample(&i, 16, &p, &mut rng(42)).unwrap();
        assert_eq!(s1, s2);
        for s in &s1 {
            s.validate().unwrap();
            assert!(s.raw_text.contains("\\boxed{"));
        }
    }

    #[test]
    fn sampled_frequencies_match_uniform_row_within_3_sigma() {
        let mut b = ToyBackend::new(ToyParams::default());
        // force a uniform answer row through the nudge hook
        let task = ToyTask::new(Op::Add, 2, 2);
        let row_ref = RowRef::Answer(task.key(), 0);
        let n_tok = b.vocab().len();
        let uniform = vec![0.0; n_tok];
        b.rows.insert(row_ref.clone(), uniform.clone());
        b.rows.insert(RowRef::Bias(task.difficulty_bucket()), vec![0.0; n_tok]);
        let probs = softmax(&b.row(&row_ref), 1.0);
        let n = 10_000;
        let mut r = rng(7);
        let mut counts = vec![0usize; n_tok];
        for _ in 0..n {
            counts[ToyBackend::sample_index(&probs, &mut r)] += 1;
        }
        let expect = n as f64 / n_tok as f64;
        let sigma = (n as f64 * (1.0 / n_tok as f64) * (1.0 - 1.0 / n_tok as f64)).sqrt();
        for (i, c) in counts.iter().enumerate() {
            assert!(
                (*c as f64 - expect).abs() < 3.0 * sigma + 1.0,
                "token {i} count {c} deviates from uniform expectation {expect:.1}"
            );
        }
    }

    #[test]
    fn temperature_orders_answer_entropy() {
        let b = ToyBackend::new(ToyParams::default());
        let task = all_tasks().into_iter().find(|t| b.class_of(t) == TaskClass::Solid).unwrap();
        let entropy = |temp: f64| {
            let p = softmax(&b.answer_logits(&task, 0, false), temp);
            -p.iter().filter(|x| **x > 0.0).map(|x| x * x.ln()).sum::<f64>()
        };
        let (e_low, e_mid, e_high) = (entropy(0.2), entropy(1.0), entropy(2.0));
        assert!(e_low < e_mid && e_mid < e_high, "entropy not increasing: {e_low} {e_mid} {e_high}");
    }

    #[test]
    fn greedy_decoding_is_argmax_and_deterministic() {
        let mut b = ToyBackend::new(ToyParams::default());
        let task = all_tasks().into_iter().find(|t| b.class_of(t) == TaskClass::Solid).unwrap();
        let i = inst(&task);
        let p = GenerationParams::new(0.0, 8);
        let s1 = b.sample(&i, 3, &p, &mut rng(1)).unwrap();
        let s2 = b.sample(&i, 3, &p, &mut rng(999)).unwrap();
        assert_eq!(s1, s2, "greedy output must not depend on the rng");
        assert_eq!(s1[0].tokens[1], task.gold_answer(), "solid tasks decode to gold greedily");
    }

    #[test]
    fn tricky_tasks_mislead_greedy_but_not_consensus() {
        let mut b = ToyBackend::new(ToyParams::default());
        let task = all_tasks()
            .into_iter()
            .find(|t| b.class_of(t) == TaskClass::Tricky && argmax(&b.style_logits(t, false)) == 0)
            .unwrap();
        let i = inst(&task);
        let greedy = b.sample(&i, 1, &GenerationParams::new(0.0, 8), &mut rng(1)).unwrap();
        assert_ne!(greedy[0].tokens[1], task.gold_answer(), "greedy should follow the bad style to a distractor");
        let samples = b.sample(&i, 64, &GenerationParams::new(1.0, 8), &mut rng(5)).unwrap();
        let gold_count = samples.iter().filter(|s| s.tokens[1] == task.gold_answer()).count();
        assert!(gold_count > 20, "consensus should still find gold, got {gold_count}/64");
    }

    #[test]
    fn trap_mode_concentrates_answer_mass_on_zero() {
        let b = ToyBackend::new(ToyParams { trap: true, ..ToyParams::default() });
        let task = all_tasks()
            .into_iter()
            .find(|t| t.difficulty_bucket() == 4 && b.vocab.position(&t.gold_answer()).is_some() && t.gold_answer() != TRAP_TOKEN)
            .unwrap();
        let marginal = b.answer_marginal(&task);
        assert!((marginal[b.vocab.trap_index] - 0.6).abs() < 1e-9, "trap mass must be 60%");
        let gold_idx = b.vocab.position(&task.gold_answer()).unwrap();
        assert!((marginal[gold_idx] - 0.22).abs() < 1e-9);
    }

    #[test]
    fn trap_majority_vote_elects_zero_with_high_probability() {
        // With 16-sample votes the trap carries the plurality ~97% of the
        // time (the 3% losses come from the anti-correlated runner count);
        // 0.93 over 400 trials sits five sigmas below that mean. Larger
        // votes push the win rate past 99%.
        let mut b = ToyBackend::new(ToyParams { trap: true, ..ToyParams::default() });
        let task = all_tasks()
            .into_iter()
            .find(|t| t.difficulty_bucket() == 4 && b.vocab.position(&t.gold_answer()).is_some() && t.gold_answer() != TRAP_TOKEN)
            .unwrap();
        let i = inst(&task);
        let mut r = rng(3);
        let mut zero_wins = 0;
        let trials = 400;
        for _ in 0..trials {
            let samples = b.sample(&i, 16, &GenerationParams::new(1.0, 8), &mut r).unwrap();
            let answers: Vec<Option<String>> = samples
                .iter()
                .map(|s| crate::rewarding::extract_answer(&s.raw_text))
                .collect();
            let v = crate::rewarding::majority_vote(&answers).unwrap();
            if v.majority_answer == TRAP_TOKEN {
                zero_wins += 1;
            }
        }
        assert!(zero_wins as f64 / trials as f64 > 0.93, "trap won only {zero_wins}/{trials}");
    }

    #[test]
    fn trap_disabled_leaves_hardest_bucket_near_uniform() {
        let b = ToyBackend::new(ToyParams::default());
        let task = all_tasks().into_iter().find(|t| t.difficulty_bucket() == 4).unwrap();
        assert_eq!(b.class_of(&task), TaskClass::Scatter);
        let marginal = b.answer_marginal(&task);
        let max = marginal.iter().cloned().fold(0.0, f64::max);
        assert!(max < 0.05, "hardest-bucket answers should be near uniform without the trap, max {max}");
    }

    #[test]
    fn complete_mutates_prompt_examples_into_parseable_tasks() {
        let mut b = ToyBackend::new(ToyParams::default());
        let prompt = "Come up with a series of tasks:\n\n\
            Task 1: Task: compute 3 plus 4.\n\
            Task 2: Find the value of 9 times 2.\n\
            Task 9:";
        let c = b.complete(prompt, &GenerationParams::new(1.0, 64), &mut rng(11)).unwrap();
        assert!(!c.truncated);
        let bodies = crate::instructgen::parse_completions(&c.text, c.truncated);
        assert_eq!(bodies.len(), 2);
        for body in &bodies {
            assert!(parse_task(body).is_some(), "mutated candidate must stay parseable: {body:?}");
        }
        assert!(c.text.contains("Task 10: "), "second candidate must carry the next task number");
    }

    #[test]
    fn unparseable_instruction_is_a_task_parse_error() {
        let mut b = ToyBackend::new(ToyParams::default());
        let bad = Instruction::new("x", "integrate e^x from 0 to 1", Source::Generated, 1);
        let err = b.sample(&bad, 4, &GenerationParams::new(1.0, 8), &mut rng(1)).unwrap_err();
        assert!(matches!(err, EngineError::TaskParse(_)));
    }

    #[test]
    fn checkpoint_round_trips_trained_rows() {
        let mut b = ToyBackend::new(ToyParams::default());
        let task = ToyTask::new(Op::Add, 5, 6);
        b.nudge(&RowRef::Answer(task.key(), 1), 3, 0.25);
        b.nudge(&RowRef::Bias(2), 7, -0.125);
        let snap = b.checkpoint().unwrap();
        let mut restored = ToyBackend::new(ToyParams::default());
        restored.restore(&snap).unwrap();
        assert_eq!(restored.row(&RowRef::Answer(task.key(), 1)), b.row(&RowRef::Answer(task.key(), 1)));
        assert_eq!(restored.row(&RowRef::Bias(2)), b.row(&RowRef::Bias(2)));
        assert_eq!(restored.checkpoint().unwrap(), snap);
    }

    #[test]
    fn seed_generation_respects_bucket_mix_and_uniqueness() {
        let mut r = rng(2);
        let lines = generate_seed_instructions(200, 0.5, &mut r);
        assert_eq!(lines.len(), 200);
        let unique: std::collections::BTreeSet<_> = lines.iter().collect();
        assert_eq!(unique.len(), 200);
        let hard = lines
            .iter()
            .filter(|l| parse_task(l).map(|t| t.difficulty_bucket() == 4).unwrap_or(false))
            .count();
        assert!((60..=140).contains(&hard), "bucket-4 share off: {hard}/200");
    }
}
