//! Few-shot instruction synthesis: prompt assembly from the seed and
//! generated pools, completion parsing, and the propose loop.

use once_cell::sync::Lazy;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backends::{GenerationBackend, GenerationParams};
use crate::config::EngineConfig;
use crate::error::{EngineError, Result};
use crate::types::{Instruction, Source};

/// Fixed preamble of the synthesis prompt.
const PROMPT_HEADER: &str = "Please act as a professional math teacher.\n\
Your goal is to create high quality math word problems to help students learn math.\n\
You only need to create the new question. Please DO NOT solve it.\n\
\n\
Come up with a series of tasks:\n";

/// Stop hint sent to backends that support stop sequences; generation past
/// the example numbering is never useful.
pub const STOP_HINT: &str = "Task 17:";

static TASK_MARKER: Lazy<Regex> = Lazy::new(|| Regex::new(r"(?m)^\s*Task\s+(\d+)\s*:\s*").unwrap());

/// An assembled few-shot prompt and which examples went into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotPrompt {
    pub text: String,
    /// Ids of the example instructions in presentation order.
    pub example_ids: Vec<String>,
    pub seed_count: usize,
    pub gen_count: usize,
}

/// Builds the synthesis prompt: `fewshot_gen_count` examples from the
/// generated pool (topped up from seeds while it is short) plus seed examples
/// to a fixed total, shuffled, numbered Task 1..N, ending with the next task
/// header for the model to fill.
pub fn assemble_prompt(
    seed_pool: &[Instruction],
    generated_pool: &[Instruction],
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<FewshotPrompt> {
    let total = cfg.fewshot_total();
    let gen_count = cfg.fewshot_gen_count.min(generated_pool.len());
    let seed_count = total - gen_count;
    if seed_pool.len() < seed_count {
        return Err(EngineError::InsufficientSeeds { have: seed_pool.len(), need: seed_count });
    }

    let mut examples: Vec<&Instruction> = Vec::with_capacity(total);
    let seed_idx = rand::seq::index::sample(rng, seed_pool.len(), seed_count);
    examples.extend(seed_idx.iter().map(|i| &seed_pool[i]));
    if gen_count > 0 {
        let gen_idx = rand::seq::index::sample(rng, generated_pool.len(), gen_count);
        examples.extend(gen_idx.iter().map(|i| &generated_pool[i]));
    }
    examples.shuffle(rng);

    let mut text = String::from(PROMPT_HEADER);
    text.push('\n');
    for (i, ex) in examples.iter().enumerate() {
        text.push_str(&format!("Task {}: {}\n", i + 1, ex.text.trim()));
    }
    text.push_str(&format!("Task {}:", total + 1));

    Ok(FewshotPrompt {
        text,
        example_ids: examples.iter().map(|e| e.id.clone()).collect(),
        seed_count,
        gen_count,
    })
}

/// Splits a completion into candidate instruction texts. The completion is
/// the continuation of a prompt ending in a task header, so the leading
/// segment (before any further `Task <n>:` marker) is the first candidate;
/// later markers delimit the rest. A truncated completion drops its final
/// candidate since it may be cut mid-sentence. Blank candidates are dropped.
pub fn parse_completions(completion: &str, truncated: bool) -> Vec<String> {
    let mut bodies: Vec<String> = Vec::new();
    let mut last_end = 0usize;
    for m in TASK_MARKER.find_iter(completion) {
        bodies.push(completion[last_end..m.start()].trim().to_string());
        last_end = m.end();
    }
    bodies.push(completion[last_end..].trim().to_string());
    if truncated {
        bodies.pop();
    }
    bodies.retain(|b| !b.is_empty());
    bodies
}

/// Renders instruction texts in the prompt's task-list format (the inverse of
/// `parse_completions` for the continuation part).
pub fn render_task_list(texts: &[&str], first_number: usize) -> String {
    let mut out = String::new();
    for (i, t) in texts.iter().enumerate() {
        if i > 0 {
            out.push_str(&format!("Task {}: ", first_number + i - 1));
        }
        out.push_str(t);
        out.push('\n');
    }
    out
}

/// One synthesis round: assembles a fresh few-shot prompt, requests one
/// completion, and wraps the parsed bodies as generated instructions
/// (possibly none). Candidates are not filtered here.
pub fn propose_once(
    backend: &mut dyn GenerationBackend,
    seed_pool: &[Instruction],
    generated_pool: &[Instruction],
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
    id_counter: &mut u64,
) -> Result<Vec<Instruction>> {
    let params = GenerationParams::new(cfg.temperature, cfg.gen_max_len).with_stop(STOP_HINT);
    let prompt = assemble_prompt(seed_pool, generated_pool, cfg, rng)?;
    let completion = backend.complete(&prompt.text, &params, rng)?;
    let mut out = Vec::new();
    for text in parse_completions(&completion.text, completion.truncated) {
        let inst = Instruction::new(format!("gen-{step}-{id_counter}"), text, Source::Generated, step);
        *id_counter += 1;
        if inst.validate().is_ok() {
            out.push(inst);
        }
    }
    Ok(out)
}

/// Generates candidate instructions until `want` are collected or the request
/// budget (`candidate_budget_factor × want` backend calls) runs out.
pub fn propose(
    backend: &mut dyn GenerationBackend,
    seed_pool: &[Instruction],
    generated_pool: &[Instruction],
    cfg: &EngineConfig,
    rng: &mut ChaCha8Rng,
    step: u64,
    id_counter: &mut u64,
    want: usize,
) -> Result<Vec<Instruction>> {
    let mut out = Vec::with_capacity(want);
    let max_requests = cfg.candidate_budget_factor.max(1) * want.max(1);
    for _ in 0..max_requests {
        if out.len() >= want {
            break;
        }
        let batch = propose_once(backend, seed_pool, generated_pool, cfg, rng, step, id_counter)?;
        out.extend(batch);
    }
    out.truncate(want);
    Ok(out)
}
