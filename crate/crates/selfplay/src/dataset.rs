//! JSONL persistence: seed datasets, emitted training triplets, and labeled
//! eval sets.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EngineError, Result};
use crate::types::{Instruction, RewardedTriplet, Source};

#[derive(Debug, Deserialize)]
struct SeedLine {
    instruction: String,
}

/// Loads a seed dataset: one JSON object per line with an `instruction` field.
/// Order is preserved; ids are assigned as `seed-<index>`.
pub fn load_seed_dataset(path: impl AsRef<Path>) -> Result<Vec<Instruction>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| EngineError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SeedLine = serde_json::from_str(&line).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        if parsed.instruction.trim().is_empty() {
            return Err(EngineError::Parse {
                path: path.display().to_string(),
                line: lineno,
                msg: "instruction text is blank after trimming".into(),
            });
        }
        out.push(Instruction::new(format!("seed-{:04}", out.len()), parsed.instruction, Source::Seed, 0));
    }
    if out.is_empty() {
        return Err(EngineError::EmptyDataset { path: path.display().to_string() });
    }
    Ok(out)
}

/// Wire format for one emitted triplet line. The instruction text together
/// with the step number identifies the vote group a response belongs to, so
/// rewards and advantages can be recomputed offline from the file alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub instruction: String,
    pub response_text: String,
    pub answer: Option<String>,
    pub reward: f64,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub step: u64,
}

impl TripletRecord {
    pub fn from_triplet(t: &RewardedTriplet, step: u64) -> TripletRecord {
        TripletRecord {
            instruction: t.instruction.text.clone(),
            response_text: t.response.raw_text.clone(),
            answer: t.response.answer.clone(),
            reward: t.reward,
            returns: t.returns.clone(),
            advantages: t.advantages.clone(),
            step,
        }
    }
}

/// Appends one JSON line per triplet and returns the number written. Rewards
/// must be assigned before emission; an empty batch leaves the file untouched.
pub fn write_triplets(batch: &[RewardedTriplet], step: u64, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    if batch.is_empty() {
        return Ok(0);
    }
    for t in batch {
        t.validate()?;
        if t.response.reward.is_none() {
            return Err(EngineError::Contract(format!(
                "triplet for {} emitted before reward assignment",
                t.instruction.id
            )));
        }
    }
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| EngineError::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    for t in batch {
        let record = TripletRecord::from_triplet(t, step);
        let line = serde_json::to_string(&record)
            .map_err(|e| EngineError::Contract(format!("triplet serialization failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| EngineError::io(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| EngineError::io(path.display().to_string(), e))?;
    Ok(batch.len())
}

/// Reads back an emitted triplet file.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<TripletRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EngineError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord = serde_json::from_str(&line).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// One labeled evaluation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub instruction: String,
    pub answer: String,
}

/// Loads a labeled eval set: one JSON object per line with `instruction` and
/// `answer` fields.
pub fn load_eval_set(path: impl AsRef<Path>) -> Result<Vec<EvalItem>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EngineError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(&line).map_err(|e| EngineError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    if out.is_empty() {
        return Err(EngineError::EmptyDataset { path: path.display().to_string() });
    }
    Ok(out)
}
