//! Engine-wide error type and the process exit codes the CLI maps it to.

use std::collections::BTreeMap;

/// Exit code for configuration / validation problems.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code for a step that could not collect any accepted instruction.
pub const EXIT_BUDGET: i32 = 3;
/// Exit code for unrecoverable backend failures.
pub const EXIT_BACKEND: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("seed dataset {path} contains no instructions")]
    EmptyDataset { path: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("seed pool has {have} instructions but few-shot assembly needs {need}")]
    InsufficientSeeds { have: usize, need: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no majority: all {n} answers in the vote group are unset")]
    NoMajority { n: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("candidate budget exhausted at step {step} with zero accepted ({budget} candidates tried); rejections: {}", format_counts(.rejections))]
    BudgetExhausted {
        step: u64,
        budget: usize,
        rejections: BTreeMap<String, u64>,
    },

    #[error("backend error: {0}")]
    Backend(String),

    #[error("backend auth error: {0}")]
    BackendAuth(String),

    #[error("toy task parse error: instruction is not a recognizable arithmetic task: {0:?}")]
    TaskParse(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

fn format_counts(counts: &BTreeMap<String, u64>) -> String {
    let parts: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(", ")
    }
}

impl EngineError {
    /// Process exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Config(_) | EngineError::Parse { .. } | EngineError::EmptyDataset { .. } => EXIT_CONFIG,
            EngineError::BudgetExhausted { .. } => EXIT_BUDGET,
            EngineError::Backend(_) | EngineError::BackendAuth(_) => EXIT_BACKEND,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        EngineError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, EngineError>;
