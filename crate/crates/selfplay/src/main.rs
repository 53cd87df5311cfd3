//! Command-line entry point for the self-play engine.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use selfplay::analysis;
use selfplay::backends::http::HttpBackend;
use selfplay::backends::toy::{generate_seed_instructions, ToyBackend, ToyParams};
use selfplay::backends::GenerationBackend;
use selfplay::config::{load_config, EngineConfig, Mode};
use selfplay::dataset;
use selfplay::error::{EngineError, Result};
use selfplay::orchestrator::{load_state, RunOptions, Runner};
use selfplay::replay::replay;

#[derive(Parser)]
#[command(name = "selfplay", version, about = "Self-play RL orchestration engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the training (or emit-only) loop.
    Run(RunArgs),
    /// Evaluate a policy on a gold-labeled eval set.
    Eval(EvalArgs),
    /// Offline analyses over run artifacts.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Recompute rewards and advantages from a triplet log and compare.
    Replay(ReplayArgs),
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Agreement between logged self-rewards and rule-based gold rewards.
    Rewards(RewardsArgs),
    /// Similarity profile of the generated pool against the seed pool.
    Diversity(DiversityArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Engine config file (.json or .toml); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed instruction dataset (JSONL). Toy runs generate one when omitted.
    #[arg(long)]
    seed_data: Option<PathBuf>,
    /// Output directory for run artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configured mode (train_toy | emit_only).
    #[arg(long)]
    mode: Option<String>,
    /// Override the total number of steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Resume from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Give hardest-bucket tasks the consensus trap initialization.
    #[arg(long)]
    trap: bool,
    /// Keep the difficulty probe but disable its accept/reject band.
    #[arg(long)]
    no_difficulty_filter: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Gold-labeled eval set (JSONL with instruction and answer fields).
    #[arg(long)]
    eval_set: PathBuf,
    /// Checkpoint whose policy snapshot should be evaluated.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Where to write eval.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    trap: bool,
}

#[derive(Args)]
struct RewardsArgs {
    /// Triplet log produced by a run.
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DiversityArgs {
    /// Checkpoint holding the seed and generated pools.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    triplets: PathBuf,
    /// Maximum tolerated absolute deviation.
    #[arg(long, default_value_t = 1e-9)]
    tolerance: f64,
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Analyze { what } => match what {
            AnalyzeCmd::Rewards(args) => cmd_rewards(args),
            AnalyzeCmd::Diversity(args) => cmd_diversity(args),
        },
        Cmd::Replay(args) => cmd_replay(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_cfg(path: &Option<PathBuf>) -> Result<EngineConfig> {
    match path {
        Some(p) => load_config(p),
        None => {
            let cfg = EngineConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

/// Picks the backend a config implies: HTTP when an endpoint is configured,
/// the local toy policy otherwise.
fn make_backend(cfg: &EngineConfig, mode: Mode, trap: bool) -> Result<Box<dyn GenerationBackend>> {
    if let Some(http) = &cfg.http {
        if mode == Mode::TrainToy {
            return Err(EngineError::Config(
                "an HTTP endpoint cannot be trained; use --mode emit_only".into(),
            ));
        }
        Ok(Box::new(HttpBackend::new(http.clone())?))
    } else {
        Ok(Box::new(ToyBackend::new(ToyParams { trap, ..ToyParams::default() })))
    }
}

/// Loads the seed pool, generating and persisting a toy dataset when no file
/// was given and the backend is local.
fn seed_pool(args: &RunArgs, cfg: &EngineConfig, out_dir: &Path) -> Result<Vec<selfplay::types::Instruction>> {
    if let Some(path) = &args.seed_data {
        return dataset::load_seed_dataset(path);
    }
    if cfg.http.is_some() {
        return Err(EngineError::Config("--seed-data is required with an HTTP backend".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0x5EED);
    let lines = generate_seed_instructions(500, 0.3, &mut rng);
    std::fs::create_dir_all(out_dir)
        .map_err(|e| EngineError::io(out_dir.display().to_string(), e))?;
    let path = out_dir.join("seeds-auto.jsonl");
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::json!({ "instruction": l }).to_string());
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    eprintln!("no --seed-data given; wrote a generated toy seed set to {}", path.display());
    if cfg.rouge_threshold < 1.0 {
        eprintln!(
            "note: the toy task space is small; rouge_threshold {} may reject most candidates \
             as duplicates (configs/toy.json uses 1.0)",
            cfg.rouge_threshold
        );
    }
    dataset::load_seed_dataset(&path)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let mode = match &args.mode {
        Some(m) => Some(m.parse::<Mode>()?),
        None => None,
    };
    let effective_mode = mode.unwrap_or(cfg.mode);
    let backend = make_backend(&cfg, effective_mode, args.trap)?;
    let opts = RunOptions {
        out_dir: args.out.clone(),
        mode_override: mode,
        steps_override: args.steps,
        resume_from: args.resume.clone(),
        enforce_difficulty: !args.no_difficulty_filter,
    };
    let mut runner = if args.resume.is_some() {
        Runner::resumed(cfg, backend, &opts)?
    } else {
        let seeds = seed_pool(&args, &cfg, &args.out)?;
        Runner::new(cfg, backend, seeds, &opts)?
    };
    let summary = runner.run()?;
    println!(
        "completed {} steps: {} instructions accepted from {} candidates ({} rejected)",
        summary.steps_completed,
        summary.instructions_accepted,
        summary.candidates_consumed,
        summary.rejections.values().sum::<u64>(),
    );
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let items = dataset::load_eval_set(&args.eval_set)?;
    let mut backend: Box<dyn GenerationBackend> =
        Box::new(ToyBackend::new(ToyParams { trap: args.trap, ..ToyParams::default() }));
    if let Some(ckpt) = &args.resume {
        let state = load_state(ckpt)?;
        if let Some(policy) = &state.policy {
            backend.restore(policy)?;
        }
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ 0xE7A1);
    let report = analysis::evaluate(backend.as_mut(), &items, &cfg, &mut rng)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| EngineError::io(args.out.display().to_string(), e))?;
    let path = args.out.join("eval.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| EngineError::Contract(format!("eval serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    println!(
        "pass@1 {:.4}  maj@{} {:.4}  over {} items (details in {})",
        report.pass_at_1,
        report.n_vote,
        report.maj_at_n,
        report.n,
        path.display()
    );
    Ok(())
}

fn cmd_rewards(args: RewardsArgs) -> Result<()> {
    let records = dataset::read_triplets(&args.triplets)?;
    let report = analysis::analyze_rewards(&records)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| EngineError::io(args.out.display().to_string(), e))?;
    let path = args.out.join("reward_agreement.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| EngineError::Contract(format!("report serialization: {e}")))?;
    std::fs::write(&path, text).map_err(|e| EngineError::io(path.display().to_string(), e))?;
    println!(
        "agreement over {} responses: cosine {:.4}, exact match {:.4} (details in {})",
        report.n,
        report.cosine,
        report.match_rate,
        path.display()
    );
    Ok(())
}

fn cmd_diversity(args: DiversityArgs) -> Result<()> {
    let state = load_state(&args.checkpoint)?;
    let report = analysis::diversity_report(&state.seed_pool, &state.generated_pool)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| EngineError::io(args.out.display().to_string(), e))?;
    let json_path = args.out.join("diversity.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| EngineError::Contract(format!("report serialization: {e}")))?;
    std::fs::write(&json_path, text).map_err(|e| EngineError::io(json_path.display().to_string(), e))?;
    analysis::write_diversity_csv(&report, &args.out.join("diversity.csv"))?;
    println!(
        "{} generated instructions: mean similarity {:.4}, max {:.4} (details in {})",
        report.n,
        report.mean_phi,
        report.max_phi,
        json_path.display()
    );
    Ok(())
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let cfg = load_cfg(&args.config)?;
    let records = dataset::read_triplets(&args.triplets)?;
    let report = replay(&records, &cfg)?;
    println!(
        "replayed {} steps / {} groups / {} responses: max reward dev {:.3e}, max advantage dev {:.3e}",
        report.steps, report.groups, report.responses, report.max_reward_dev, report.max_advantage_dev
    );
    if !report.within(args.tolerance) {
        return Err(EngineError::Contract(format!(
            "replay deviations exceed tolerance {}",
            args.tolerance
        )));
    }
    println!("log is consistent within {}", args.tolerance);
    Ok(())
}
