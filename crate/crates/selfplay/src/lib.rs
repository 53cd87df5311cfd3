//! Self-play reinforcement-learning orchestration for instruction-following
//! policies. Each training step synthesizes candidate instructions few-shot
//! from the existing pools, filters them online (keywords, length, novelty,
//! difficulty), scores sampled responses by majority-vote self-rewarding, and
//! feeds the rewarded rollouts to a policy-gradient update — no external
//! labels required. A tabular toy backend makes full training runs cheap and
//! exactly reproducible; an HTTP backend drives real completion services in
//! emit-only mode.

pub mod analysis;
pub mod backends;
pub mod config;
pub mod dataset;
pub mod error;
pub mod filters;
pub mod instructgen;
pub mod orchestrator;
pub mod replay;
pub mod rewarding;
pub mod rlcore;
pub mod textmetrics;
pub mod types;
