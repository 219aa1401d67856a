use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use prmlab::cli::{cmd_ablate, cmd_dump, cmd_eval, cmd_gen, cmd_sweep, cmd_train};
use prmlab::cli::{PipelineKind, RunConfig, TrainMethod};
use prmlab::error::Result;

#[derive(Parser)]
#[command(name = "prmlab", about = "Length-bias laboratory for process reward models")]
struct Cli {
    /// JSON run configuration; defaults apply for omitted fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and eval corpora plus the feature schema.
    Gen,
    /// Train the vanilla reward model.
    TrainPrm,
    /// Train the post-hoc bias estimator against a frozen vanilla model.
    TrainBias,
    /// Train the reward model and bias head jointly.
    TrainJoint,
    /// Run best-of-N evaluation for one pipeline.
    Eval {
        /// vanilla | penalty | estimator | joint
        #[arg(long, default_value = "vanilla")]
        pipeline: PipelineKind,
    },
    /// Emit the six-row component ablation matrix.
    Ablate,
    /// Sweep the joint correction magnitude over the configured grid.
    Sweep,
    /// Dump per-step reward/length distributions for vanilla and joint.
    DumpDist,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out_dir) = cli.out_dir {
        cfg.out_dir = out_dir;
    }
    cfg.validate()?;

    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::TrainPrm => cmd_train(&cfg, TrainMethod::Vanilla),
        Command::TrainBias => cmd_train(&cfg, TrainMethod::Bias),
        Command::TrainJoint => cmd_train(&cfg, TrainMethod::Joint),
        Command::Eval { pipeline } => {
            let report = cmd_eval(&cfg, pipeline)?;
            println!(
                "arith_acc={:.4} mean_selected_length={:.2}",
                report.arith_acc, report.mean_selected_length
            );
            Ok(())
        }
        Command::Ablate => cmd_ablate(&cfg),
        Command::Sweep => cmd_sweep(&cfg),
        Command::DumpDist => cmd_dump(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
