//! `manifold-glue` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use manifold_glue::graph::Task;

#[derive(Parser, Debug)]
#[command(
    name = "manifold-glue",
    version,
    about = "Multi-domain graph pre-training by gluing local Riemannian geometry"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain suite (one JSONL file per domain).
    GenSynthetic(GenArgs),
    /// Pre-train on the datasets listed in a run config.
    Pretrain(PretrainArgs),
    /// Few-shot adaptation of a checkpoint to a target domain.
    Adapt(AdaptArgs),
    /// Measure the geometric transfer metric of a dataset without training.
    Gtm(GtmArgs),
    /// Write per-record `z` and `diag(G)` as CSV.
    ExportEmbeddings(ExportArgs),
    /// Print a checkpoint's manifest summary.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Synthetic spec (JSON); the three-domain reference suite when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    knn_k: Option<usize>,
    /// Stop once this many epochs are finished.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args, Debug)]
struct TargetArgs {
    /// Checkpoint; defaults to `<out_dir>/checkpoint.mgck` of the config.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target dataset; defaults to the config's `target`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    task: TaskArg,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    target: TargetArgs,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GtmArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    task: TaskArg,
    /// Nearest prototypes per record.
    #[arg(long, default_value_t = 2)]
    k: usize,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Graph)]
    task: TaskArg,
    /// CSV path; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    checkpoint: PathBuf,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum TaskArg {
    Node,
    Link,
    Graph,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Task {
        match t {
            TaskArg::Node => Task::Node,
            TaskArg::Link => Task::Link,
            TaskArg::Graph => Task::Graph,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = commands::check_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::GenSynthetic(a) => commands::gen_synthetic(a.spec.as_deref(), &a.out, a.seed),
        Command::Pretrain(a) => commands::pretrain(commands::PretrainOpts {
            config: a.config,
            seed: a.seed,
            out: a.out,
            resume: a.resume,
            knn_k: a.knn_k,
            stop_after: a.stop_after,
        }),
        Command::Adapt(a) => commands::adapt(commands::AdaptOpts {
            config: a.config,
            checkpoint: a.target.checkpoint,
            dataset: a.target.dataset.map(|p| (p, a.target.task.into())),
            shots: a.shots,
            lambda: a.lambda,
            seed: a.seed,
            out: a.out,
        }),
        Command::Gtm(a) => commands::gtm(&a.checkpoint, &a.dataset, a.task.into(), a.k),
        Command::ExportEmbeddings(a) => {
            commands::export_embeddings(&a.checkpoint, &a.dataset, a.task.into(), a.out.as_deref())
        }
        Command::Inspect(a) => commands::inspect(&a.checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
