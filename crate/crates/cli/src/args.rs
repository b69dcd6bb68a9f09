use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "fscil", version, about = "Few-shot class-incremental learning experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config in TOML. Built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory. Defaults to a directory under the run root.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// `dotted.key=value` applied on top of the config; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Where output directories go when `--out` is absent.
    #[arg(long, global = true, env = "FSCIL_RUN_ROOT", default_value = "runs", value_name = "DIR")]
    pub run_root: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Train and evaluate one experiment end to end.
    Run(RunArgs),
    /// Tables and figures from one or more finished runs.
    Report(ReportArgs),
    /// One run per cell of a parameter grid, ranked by final accuracy.
    Sweep(SweepArgs),
    /// The eight stability / adaptability / training combinations.
    Ablate(AblateArgs),
    /// Re-evaluate a saved checkpoint on its cumulative test set.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,

    /// Clear a non-empty output directory first.
    #[arg(long, conflicts_with = "resume")]
    pub force: bool,

    /// Stop once this session has been checkpointed.
    #[arg(long, value_name = "SESSION")]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run directories or record.json files.
    #[arg(required = true, num_args = 1.., value_name = "RUN")]
    pub runs: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// `key=v1,v2,...`; repeat for a cartesian product.
    #[arg(long = "grid", required = true, value_name = "KEY=VALUES")]
    pub grid: Vec<String>,

    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    /// Clear a non-empty output directory first.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    /// Seeds to average over. Defaults to the config seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Clear a non-empty output directory first.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    pub run_dir: PathBuf,

    /// Checkpoint to evaluate. Defaults to the latest.
    #[arg(long)]
    pub session: Option<usize>,
}
