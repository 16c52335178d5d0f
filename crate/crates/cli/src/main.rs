//! `reloc`: synthetic data generation, confidence training, localization
//! and ablation runs driven by one JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reloc_core::RelocError;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "reloc", version, about = "Camera re-localization with learned correspondence confidence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path (directory for `synth`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth(Common),
    /// Train the confidence model on a dataset.
    TrainConfidence(Common),
    /// Localize every frame and write per-frame errors.
    Localize(Common),
    /// Run the variant comparison table.
    Ablate(Common),
    /// Check a dataset directory.
    Validate(Common),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|e| e.downcast_ref::<RelocError>()) else {
        return EXIT_DATA;
    };
    match e {
        RelocError::InvalidConfig(_) | RelocError::InvalidIntrinsics(_) => EXIT_CONFIG,
        RelocError::DivergedTraining { .. }
        | RelocError::AllHypothesesFailed(_)
        | RelocError::FailedHypothesis(_)
        | RelocError::DegenerateConfiguration(_)
        | RelocError::BehindCamera { .. }
        | RelocError::DegenerateLabels => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn required_out(common: &Common) -> anyhow::Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| RelocError::InvalidConfig("--out is required for this subcommand".into()).into())
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let common = match &cli.command {
        Command::Synth(c)
        | Command::TrainConfidence(c)
        | Command::Localize(c)
        | Command::Ablate(c)
        | Command::Validate(c) => c,
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| RelocError::InvalidConfig(format!("--threads: {e}")))?;
    }
    let (cfg, base) = RunConfig::load(&common.config, common.seed)?;
    match &cli.command {
        Command::Synth(c) => {
            let out = match &c.out {
                Some(p) => p.clone(),
                None => config::resolve(&base, &cfg.dataset, "dataset")?,
            };
            commands::synth(&cfg, &out)
        }
        Command::TrainConfidence(c) => commands::train(&cfg, &base, &required_out(c)?),
        Command::Localize(c) => commands::localize_cmd(&cfg, &base, &required_out(c)?),
        Command::Ablate(c) => commands::ablate(&cfg, &base, &required_out(c)?),
        Command::Validate(c) => commands::validate(&cfg, &base, c.out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELOC_LOG", "error")).init();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
