//! The run loop: each step proposes candidate instructions, filters them,
//! scores the survivors' probe responses by majority vote, assembles rewarded
//! training triplets, and (in training mode) applies one policy update.
//! Every artifact needed to resume or audit a run is written under the
//! output directory.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use serde::Serialize;

use crate::backends::GenerationBackend;
use crate::config::{Algorithm, EngineConfig, Mode};
use crate::dataset;
use crate::error::{EngineError, Result};
use crate::filters::{self, FilterOutcome};
use crate::instructgen;
use crate::rlcore;
use crate::textmetrics::{self, TokenSeq};
use crate::types::{Instruction, IterationState, RewardedTriplet};

/// How a run is launched; everything not in the config schema lives here.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Overrides the configured mode when set.
    pub mode_override: Option<Mode>,
    /// Overrides `steps_per_iteration × iterations` when set.
    pub steps_override: Option<u64>,
    /// Checkpoint file to resume from.
    pub resume_from: Option<PathBuf>,
    /// When false the difficulty probe still runs (training needs its
    /// rollouts) but its band check cannot reject.
    pub enforce_difficulty: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            out_dir: PathBuf::from("out"),
            mode_override: None,
            steps_override: None,
            resume_from: None,
            enforce_difficulty: true,
        }
    }
}

/// Per-step accounting. Wall time is reported here and in the metrics file,
/// but deliberately kept out of steps.csv so reruns are byte-identical.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub iteration: u64,
    pub accepted: usize,
    pub candidates_consumed: u64,
    pub rejections: BTreeMap<String, u64>,
    pub mean_reward: f64,
    pub mean_phi: f64,
    pub loss: Option<f64>,
    pub grad_norm: Option<f64>,
    pub mean_kl: Option<f64>,
    pub generated_pool_size: usize,
    pub wall_ms: u128,
}

/// End-of-run summary, serialized as metrics.json.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub algorithm: Algorithm,
    pub steps_completed: u64,
    pub instructions_accepted: u64,
    pub candidates_consumed: u64,
    pub rejections: BTreeMap<String, u64>,
    pub generated_pool_size: usize,
    pub final_checkpoint: PathBuf,
    pub wall_ms: u128,
    pub steps: Vec<StepReport>,
}

fn io_err(path: &Path, e: std::io::Error) -> EngineError {
    EngineError::io(path.display().to_string(), e)
}

/// Reads a checkpoint file back into run state.
pub fn load_state(path: &Path) -> Result<IterationState> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| EngineError::Checkpoint(format!("{}: {e}", path.display())))
}

/// Drives a full run against one backend.
pub struct Runner {
    cfg: EngineConfig,
    backend: Box<dyn GenerationBackend>,
    state: IterationState,
    mode: Mode,
    total_steps: u64,
    enforce_difficulty: bool,
    out_dir: PathBuf,
    token_cache: BTreeMap<String, TokenSeq>,
    reports: Vec<StepReport>,
}

impl Runner {
    /// Fresh run from a seed pool. Truncates any prior artifacts in `out_dir`.
    pub fn new(
        cfg: EngineConfig,
        backend: Box<dyn GenerationBackend>,
        seed_pool: Vec<Instruction>,
        opts: &RunOptions,
    ) -> Result<Runner> {
        cfg.validate()?;
        let state = IterationState {
            step: 0,
            iteration: 1,
            seed_pool,
            generated_pool: Vec::new(),
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed),
            policy: None,
            counters: BTreeMap::new(),
        };
        let runner = Self::assemble(cfg, backend, state, opts)?;
        fs::write(runner.out_dir.join("triplets.jsonl"), "").map_err(|e| io_err(&runner.out_dir, e))?;
        fs::write(runner.out_dir.join("steps.csv"), Self::csv_header()).map_err(|e| io_err(&runner.out_dir, e))?;
        Ok(runner)
    }

    /// Resumes from the checkpoint named in `opts.resume_from`; the backend's
    /// policy is restored from the snapshot inside it.
    pub fn resumed(cfg: EngineConfig, backend: Box<dyn GenerationBackend>, opts: &RunOptions) -> Result<Runner> {
        cfg.validate()?;
        let path = opts
            .resume_from
            .as_ref()
            .ok_or_else(|| EngineError::Config("resume requested without a checkpoint path".into()))?;
        let state = load_state(path)?;
        let mut runner = Self::assemble(cfg, backend, state, opts)?;
        if let Some(policy) = runner.state.policy.clone() {
            runner.backend.restore(&policy)?;
        }
        if !runner.out_dir.join("steps.csv").exists() {
            fs::write(runner.out_dir.join("steps.csv"), Self::csv_header())
                .map_err(|e| io_err(&runner.out_dir, e))?;
        }
        Ok(runner)
    }

    fn assemble(
        cfg: EngineConfig,
        backend: Box<dyn GenerationBackend>,
        state: IterationState,
        opts: &RunOptions,
    ) -> Result<Runner> {
        let mode = opts.mode_override.unwrap_or(cfg.mode);
        if mode == Mode::TrainToy && !backend.capabilities().trainable {
            return Err(EngineError::Config(
                "training mode requires a trainable backend; use emit_only".into(),
            ));
        }
        let total_steps = opts
            .steps_override
            .unwrap_or(cfg.steps_per_iteration as u64 * cfg.iterations as u64);
        fs::create_dir_all(&opts.out_dir).map_err(|e| io_err(&opts.out_dir, e))?;
        let mut token_cache = BTreeMap::new();
        for inst in state.seed_pool.iter().chain(&state.generated_pool) {
            token_cache.insert(inst.id.clone(), textmetrics::tokenize(&inst.text));
        }
        Ok(Runner {
            cfg,
            backend,
            state,
            mode,
            total_steps,
            enforce_difficulty: opts.enforce_difficulty,
            out_dir: opts.out_dir.clone(),
            token_cache,
            reports: Vec::new(),
        })
    }

    pub fn state(&self) -> &IterationState {
        &self.state
    }

    pub fn backend_mut(&mut self) -> &mut dyn GenerationBackend {
        self.backend.as_mut()
    }

    pub fn into_backend(self) -> Box<dyn GenerationBackend> {
        self.backend
    }

    /// Runs the remaining steps, checkpointing at iteration boundaries and at
    /// the end, and writes metrics.json.
    pub fn run(&mut self) -> Result<RunSummary> {
        let started = std::time::Instant::now();
        while self.state.step < self.total_steps {
            let report = self.run_step()?;
            self.append_csv(&report)?;
            self.reports.push(report);
            let at_boundary = self.state.step % self.cfg.steps_per_iteration as u64 == 0;
            if at_boundary || self.state.step == self.total_steps {
                self.write_checkpoint()?;
            }
        }
        let final_checkpoint = self.checkpoint_path(self.state.step);
        if !final_checkpoint.exists() {
            self.write_checkpoint()?;
        }
        let summary = RunSummary {
            mode: self.mode,
            algorithm: self.cfg.algorithm,
            steps_completed: self.state.step,
            instructions_accepted: self.state.counters.get("accepted_total").copied().unwrap_or(0),
            candidates_consumed: self.state.counters.get("candidates_consumed").copied().unwrap_or(0),
            rejections: self
                .state
                .counters
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("rejected_").map(|r| (r.to_string(), *v)))
                .collect(),
            generated_pool_size: self.state.generated_pool.len(),
            final_checkpoint,
            wall_ms: started.elapsed().as_millis(),
            steps: self.reports.clone(),
        };
        let metrics = serde_json::to_string_pretty(&summary)
            .map_err(|e| EngineError::Checkpoint(format!("metrics serialization: {e}")))?;
        let path = self.out_dir.join("metrics.json");
        fs::write(&path, metrics).map_err(|e| io_err(&path, e))?;
        Ok(summary)
    }

    /// One step: propose → filter → reward → (train) → log. Fails with
    /// BudgetExhausted when the candidate budget produces no acceptance.
    pub fn run_step(&mut self) -> Result<StepReport> {
        let started = std::time::Instant::now();
        let step = self.state.step + 1;
        let iteration = (step - 1) / self.cfg.steps_per_iteration as u64 + 1;
        let budget = self.cfg.step_budget() as u64;
        let want = self.cfg.rollout_batch_size;

        let mut consumed = 0u64;
        let mut futile_completions = 0u64;
        let mut rejections: BTreeMap<String, u64> = BTreeMap::new();
        let mut queue: VecDeque<Instruction> = VecDeque::new();
        let mut accepted: Vec<(Instruction, FilterOutcome)> = Vec::new();
        let mut accepted_tokens: Vec<(String, TokenSeq)> = Vec::new();

        while accepted.len() < want && consumed < budget && futile_completions < budget {
            if queue.is_empty() {
                let mut id_counter = self.state.counters.get("id_counter").copied().unwrap_or(0);
                let batch = instructgen::propose_once(
                    self.backend.as_mut(),
                    &self.state.seed_pool,
                    &self.state.generated_pool,
                    &self.cfg,
                    &mut self.state.rng,
                    step,
                    &mut id_counter,
                )?;
                self.state.counters.insert("id_counter".to_string(), id_counter);
                if batch.is_empty() {
                    futile_completions += 1;
                    continue;
                }
                queue.extend(batch);
            }
            let cand = queue.pop_front().expect("queue refilled above");
            consumed += 1;

            let mut pool: Vec<(&str, &TokenSeq)> =
                Vec::with_capacity(self.token_cache.len() + accepted_tokens.len());
            for inst in self.state.seed_pool.iter().chain(&self.state.generated_pool) {
                if let Some(t) = self.token_cache.get(&inst.id) {
                    pool.push((inst.id.as_str(), t));
                }
            }
            for (id, t) in &accepted_tokens {
                pool.push((id.as_str(), t));
            }

            let outcome = filters::run_pipeline(
                &cand,
                &pool,
                self.backend.as_mut(),
                &self.cfg,
                self.enforce_difficulty,
                &mut self.state.rng,
            )?;
            if outcome.report.verdict.accepted() {
                let mut inst = cand;
                inst.max_similarity = Some(outcome.report.phi);
                accepted_tokens.push((inst.id.clone(), outcome.tokens.clone()));
                accepted.push((inst, outcome));
            } else {
                *rejections.entry(outcome.report.verdict.as_str().to_string()).or_insert(0) += 1;
            }
        }
        // any still-queued proposals are discarded; the next step starts fresh

        if accepted.is_empty() {
            return Err(EngineError::BudgetExhausted { step, budget: budget as usize, rejections });
        }

        let triplets = self.build_triplets(&accepted)?;
        dataset::write_triplets(&triplets, step, &self.out_dir.join("triplets.jsonl"))?;

        let stats = if self.mode == Mode::TrainToy {
            Some(self.backend.update(&triplets, &self.cfg)?)
        } else {
            None
        };

        let n_resp = triplets.len() as f64;
        let mean_reward = triplets.iter().map(|t| t.reward).sum::<f64>() / n_resp;
        let mean_phi =
            accepted.iter().map(|(_, o)| o.report.phi).sum::<f64>() / accepted.len() as f64;

        let accepted_n = accepted.len();
        for (inst, outcome) in accepted {
            self.token_cache.insert(inst.id.clone(), outcome.tokens);
            self.state.generated_pool.push(inst);
        }
        self.state.bump("accepted_total", accepted_n as u64);
        self.state.bump("candidates_consumed", consumed);
        for (reason, n) in &rejections {
            self.state.bump(&format!("rejected_{reason}"), *n);
        }
        self.state.step = step;
        self.state.iteration = iteration;

        Ok(StepReport {
            step,
            iteration,
            accepted: accepted_n,
            candidates_consumed: consumed,
            rejections,
            mean_reward,
            mean_phi,
            loss: stats.as_ref().map(|s| s.loss),
            grad_norm: stats.as_ref().map(|s| s.grad_norm),
            mean_kl: stats.as_ref().map(|s| s.mean_kl),
            generated_pool_size: self.state.generated_pool.len(),
            wall_ms: started.elapsed().as_millis(),
        })
    }

    /// Turns accepted candidates and their rewarded probes into training
    /// triplets with algorithm-specific returns and advantages.
    fn build_triplets(&self, accepted: &[(Instruction, FilterOutcome)]) -> Result<Vec<RewardedTriplet>> {
        let beta = if self.backend.capabilities().has_ref_logprobs { self.cfg.kl_coef } else { 0.0 };
        let mut triplets = Vec::new();
        match self.cfg.algorithm {
            Algorithm::ReinforcePp => {
                // returns carry the token-level KL penalty; advantages are the
                // returns standardized over every token in the step batch
                let mut all_returns = Vec::new();
                for (_, outcome) in accepted {
                    for s in &outcome.probe {
                        let reward = s.reward.expect("accepted probes are rewarded");
                        all_returns.push(rlcore::returns_with_kl_penalty(reward, &s.log_ratios(), beta));
                    }
                }
                let batch = rlcore::standardize(&all_returns)?;
                let mut idx = 0;
                for (inst, outcome) in accepted {
                    for s in &outcome.probe {
                        triplets.push(RewardedTriplet {
                            instruction: inst.clone(),
                            response: s.clone(),
                            reward: s.reward.expect("accepted probes are rewarded"),
                            returns: all_returns[idx].clone(),
                            advantages: batch.advantages[idx].clone(),
                        });
                        idx += 1;
                    }
                }
            }
            Algorithm::Grpo | Algorithm::Rloo => {
                // group-relative scalar advantages, broadcast across tokens;
                // returns are the raw reward broadcast the same way
                for (inst, outcome) in accepted {
                    let rewards: Vec<f64> =
                        outcome.probe.iter().map(|s| s.reward.expect("accepted probes are rewarded")).collect();
                    let scalars = match self.cfg.algorithm {
                        Algorithm::Grpo => rlcore::advantage_grpo(&rewards)?,
                        _ => rlcore::advantage_rloo(&rewards)?,
                    };
                    for (s, a) in outcome.probe.iter().zip(&scalars) {
                        let t = s.tokens.len();
                        triplets.push(RewardedTriplet {
                            instruction: inst.clone(),
                            response: s.clone(),
                            reward: s.reward.expect("accepted probes are rewarded"),
                            returns: vec![s.reward.unwrap(); t],
                            advantages: vec![*a; t],
                        });
                    }
                }
            }
        }
        for t in &triplets {
            t.validate()?;
        }
        Ok(triplets)
    }

    fn csv_header() -> &'static str {
        "step,iteration,accepted,consumed,rej_keyword,rej_too_short,rej_too_long,rej_duplicate,rej_too_hard,rej_too_easy,mean_reward,mean_phi,loss,grad_norm,mean_kl,generated_pool\n"
    }

    fn append_csv(&self, r: &StepReport) -> Result<()> {
        let path = self.out_dir.join("steps.csv");
        let rej = |k: &str| r.rejections.get(k).copied().unwrap_or(0);
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let row = format!(
            "{},{},{},{},{},{},{},{},{},{},{:.9},{:.9},{},{},{},{}\n",
            r.step,
            r.iteration,
            r.accepted,
            r.candidates_consumed,
            rej("keyword"),
            rej("too_short"),
            rej("too_long"),
            rej("duplicate"),
            rej("too_hard"),
            rej("too_easy"),
            r.mean_reward,
            r.mean_phi,
            opt(r.loss),
            opt(r.grad_norm),
            opt(r.mean_kl),
            r.generated_pool_size,
        );
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        f.write_all(row.as_bytes()).map_err(|e| io_err(&path, e))
    }

    fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.out_dir.join(format!("checkpoint-step-{step:05}.json"))
    }

    /// Serializes the full run state (pools, RNG stream, counters, policy
    /// snapshot) to a deterministic JSON file.
    pub fn write_checkpoint(&mut self) -> Result<PathBuf> {
        let snapshot = self.backend.checkpoint()?;
        self.state.policy = if snapshot.is_null() { None } else { Some(snapshot) };
        let path = self.checkpoint_path(self.state.step);
        let text = serde_json::to_string_pretty(&self.state)
            .map_err(|e| EngineError::Checkpoint(e.to_string()))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::{generate_seed_instructions, ToyBackend, ToyParams};
    use crate::types::Source;

    fn toy_cfg() -> EngineConfig {
        let mut cfg = EngineConfig::default();
        cfg.rollout_batch_size = 2;
        cfg.n_vote = 6;
        cfg.n_samples_per_prompt = 6;
        cfg.rouge_threshold = 1.0; // the toy task space is tiny; keep repeats
        cfg.actor_lr = 0.05;
        cfg
    }

    fn seed_pool(n: usize, seed: u64) -> Vec<Instruction> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        generate_seed_instructions(n, 0.2, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, text)| Instruction::new(format!("seed-{i:04}"), text, Source::Seed, 0))
            .collect()
    }

    fn opts(dir: &Path, steps: u64) -> RunOptions {
        RunOptions {
            out_dir: dir.to_path_buf(),
            steps_override: Some(steps),
            ..RunOptions::default()
        }
    }

    #[test]
    fn short_run_produces_all_artifacts_and_conserves_candidates() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let mut runner = Runner::new(toy_cfg(), backend, seed_pool(40, 7), &opts(dir.path(), 3)).unwrap();
        let summary = runner.run().unwrap();
        assert_eq!(summary.steps_completed, 3);
        assert!(summary.instructions_accepted >= 3);
        for r in &summary.steps {
            let rejected: u64 = r.rejections.values().sum();
            assert_eq!(
                r.candidates_consumed,
                r.accepted as u64 + rejected,
                "candidate conservation violated at step {}",
                r.step
            );
            assert!(r.loss.is_some(), "training mode must report a loss");
        }
        assert!(dir.path().join("triplets.jsonl").exists());
        assert!(dir.path().join("steps.csv").exists());
        assert!(dir.path().join("metrics.json").exists());
        assert!(summary.final_checkpoint.exists());
        let csv = fs::read_to_string(dir.path().join("steps.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4, "header plus one row per step");
        let records = dataset::read_triplets(&dir.path().join("triplets.jsonl")).unwrap();
        assert_eq!(records.len() as u64, summary.instructions_accepted * 6);
    }

    #[test]
    fn identical_seeds_give_byte_identical_artifacts() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for dir in [&d1, &d2] {
            let backend = Box::new(ToyBackend::new(ToyParams::default()));
            Runner::new(toy_cfg(), backend, seed_pool(40, 7), &opts(dir.path(), 3))
                .unwrap()
                .run()
                .unwrap();
        }
        let read = |d: &tempfile::TempDir, f: &str| fs::read(d.path().join(f)).unwrap();
        assert_eq!(read(&d1, "steps.csv"), read(&d2, "steps.csv"));
        assert_eq!(read(&d1, "triplets.jsonl"), read(&d2, "triplets.jsonl"));
        assert_eq!(read(&d1, "checkpoint-step-00003.json"), read(&d2, "checkpoint-step-00003.json"));
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let full_dir = tempfile::tempdir().unwrap();
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let mut full = Runner::new(toy_cfg(), backend, seed_pool(40, 7), &opts(full_dir.path(), 4)).unwrap();
        full.run().unwrap();

        let part_dir = tempfile::tempdir().unwrap();
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let mut part = Runner::new(toy_cfg(), backend, seed_pool(40, 7), &opts(part_dir.path(), 2)).unwrap();
        part.run().unwrap();

        let resume_dir = tempfile::tempdir().unwrap();
        let mut o = opts(resume_dir.path(), 4);
        o.resume_from = Some(part_dir.path().join("checkpoint-step-00002.json"));
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let mut resumed = Runner::resumed(toy_cfg(), backend, &o).unwrap();
        resumed.run().unwrap();

        let a = fs::read(full_dir.path().join("checkpoint-step-00004.json")).unwrap();
        let b = fs::read(resume_dir.path().join("checkpoint-step-00004.json")).unwrap();
        assert_eq!(a, b, "resumed run diverged from the uninterrupted one");
    }

    #[test]
    fn emit_mode_writes_triplets_but_never_updates() {
        let dir = tempfile::tempdir().unwrap();
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let fresh_snapshot = backend.checkpoint().unwrap();
        let mut o = opts(dir.path(), 2);
        o.mode_override = Some(Mode::EmitOnly);
        let mut runner = Runner::new(toy_cfg(), backend, seed_pool(40, 7), &o).unwrap();
        let summary = runner.run().unwrap();
        assert!(summary.steps.iter().all(|s| s.loss.is_none()));
        let records = dataset::read_triplets(&dir.path().join("triplets.jsonl")).unwrap();
        assert!(!records.is_empty(), "emit mode must still write triplets");
        assert_eq!(
            runner.backend_mut().checkpoint().unwrap(),
            fresh_snapshot,
            "emit mode must leave the policy untouched"
        );
    }

    #[test]
    fn impossible_difficulty_band_exhausts_the_budget() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_cfg();
        cfg.gamma_diff = 0.98;
        cfg.gamma_easy = 0.99; // nothing votes this tightly
        let backend = Box::new(ToyBackend::new(ToyParams::default()));
        let mut runner = Runner::new(cfg.clone(), backend, seed_pool(40, 7), &opts(dir.path(), 1)).unwrap();
        let err = runner.run().unwrap_err();
        match err {
            EngineError::BudgetExhausted { step, budget, ref rejections } => {
                assert_eq!(step, 1);
                assert_eq!(budget, cfg.step_budget());
                let total: u64 = rejections.values().sum();
                assert_eq!(total as usize, budget, "every consumed candidate must be accounted for");
            }
            other => panic!("expected BudgetExhausted, got {other:?}"),
        }
        assert_eq!(err.exit_code(), crate::error::EXIT_BUDGET);
    }

    #[test]
    fn untrainable_backend_cannot_run_in_training_mode() {
        struct Stub;
        impl GenerationBackend for Stub {
            fn capabilities(&self) -> crate::backends::BackendCapabilities {
                crate::backends::BackendCapabilities { has_ref_logprobs: false, trainable: false }
            }
            fn complete(
                &mut self,
                _: &str,
                _: &crate::backends::GenerationParams,
                _: &mut rand_chacha::ChaCha8Rng,
            ) -> Result<crate::backends::Completion> {
                unreachable!()
            }
            fn sample(
                &mut self,
                _: &Instruction,
                _: usize,
                _: &crate::backends::GenerationParams,
                _: &mut rand_chacha::ChaCha8Rng,
            ) -> Result<Vec<crate::types::ResponseSample>> {
                unreachable!()
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let err = Runner::new(toy_cfg(), Box::new(Stub), seed_pool(40, 7), &opts(dir.path(), 1))
            .err()
            .expect("untrainable backend must be rejected");
        assert!(matches!(err, EngineError::Config(_)));
    }
}
