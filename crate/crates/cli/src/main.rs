//! `guirl`: run every stage of the training pipeline from one config file.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "guirl", version, about = "GUI-agent reinforcement learning at desk scale")]
struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Offline GRPO on step prompts from the dataset or the task oracles.
    TrainOffline(TrainArgs),
    /// Online GRPO on full episodes.
    TrainOnline(OnlineArgs),
    /// Merge checkpoints as the config's `merge` section says.
    Merge(MergeArgs),
    /// Greedy (or sampled) evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Iterative trace refinement of the dataset with the replay judge.
    Refine(RefineArgs),
    /// Serve a simulated device fleet until interrupted.
    ServeFleet(ServeArgs),
    /// Compare the objective's gradient with finite differences on real rollouts.
    Gradcheck(GradArgs),
    /// Replay an action sequence on a task and print every observation.
    EnvReplay(ReplayArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Start from this checkpoint instead of the uniform policy.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Args)]
pub struct OnlineArgs {
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Run episodes in-process (the default).
    #[arg(long, conflicts_with = "gateway")]
    pub local: bool,
    /// Run episodes on the fleet named in the config's `gateway` section.
    #[arg(long)]
    pub gateway: bool,
}

#[derive(Args)]
pub struct MergeArgs {
    /// Checkpoints to merge.
    #[arg(required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Base model for task vectors; the uniform policy when omitted.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sampled rollouts per task instead of one greedy rollout.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Per-task rows for plotting.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RefineArgs {
    /// Write a review sample of this many refined traces (overrides `refine.review`).
    #[arg(long)]
    pub review: Option<usize>,
}

#[derive(Args)]
pub struct ServeArgs {
    /// Where to write the resolved topology (default: `<out>/topology.json`).
    #[arg(long)]
    pub topology_out: Option<PathBuf>,
    /// Use a clock that never advances, so leases never expire.
    #[arg(long)]
    pub fake_clock: bool,
    /// Stop after this long instead of waiting for Ctrl-C.
    #[arg(long)]
    pub duration_ms: Option<u64>,
}

#[derive(Args)]
pub struct GradArgs {
    /// Evaluate around this checkpoint instead of the fresh policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
}

#[derive(Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub task: String,
    /// One action per line; the task's oracle when omitted.
    #[arg(long)]
    pub actions: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.out_dir {
        cfg.output_dir = Some(d);
    }
    match cli.command {
        Command::TrainOffline(a) => commands::train_offline(&cfg, &a),
        Command::TrainOnline(a) => commands::train_online(&cfg, &a),
        Command::Merge(a) => commands::merge(&cfg, &a),
        Command::Eval(a) => commands::eval(&cfg, &a),
        Command::Refine(a) => commands::refine(&cfg, &a),
        Command::ServeFleet(a) => commands::serve_fleet(&cfg, &a),
        Command::Gradcheck(a) => commands::gradcheck(&cfg, &a),
        Command::EnvReplay(a) => commands::env_replay(&cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("guirl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
