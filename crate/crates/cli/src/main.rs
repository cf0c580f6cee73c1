//! `cacc`: run the crowd-counting adaptation pipeline stage by stage.
//!
//! Exit codes: 0 on success, 1 on invalid input or configuration, 2 when a
//! numerical failure (a non-finite loss) aborts training.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use cacc::experiment::{AblationMode, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cacc", version, about = "Crowd-aware domain adaptation for crowd counting")]
struct Cli {
    /// Print the default experiment configuration as JSON and exit.
    #[arg(long)]
    print_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic source and target datasets.
    GenData(Common),
    /// Train the weak learner on source bags.
    TrainPcs(Common),
    /// Export crowd segmentations of every scene.
    Seg(Common),
    /// Train the counter on the source domain.
    Pretrain(Common),
    /// Adapt the pretrained counter to the target domain.
    Adapt(Common),
    /// Evaluate an adapted counter on the target test split.
    Eval(EvalArgs),
    /// Render a stored density or segmentation map as a PGM image.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the experiment seed (the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the ablation mode.
    #[arg(long, value_parser = parse_mode)]
    ablation: Option<AblationMode>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Score the annotations against themselves instead of a counter.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    /// Stored density map or segmentation to render.
    #[arg(long)]
    input: PathBuf,
    /// Output image; defaults to the input path with a `.pgm` extension.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: cacc::Error| e.to_string())
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
    if cli.print_default_config {
        let json = serde_json::to_string_pretty(&ExperimentConfig::default()).expect("config serializes");
        println!("{json}");
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand or --print-default-config is required (see --help)");
        return ExitCode::from(1);
    };
    match commands::run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
