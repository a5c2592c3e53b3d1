use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vctrl::{run, CliError, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "vctrl",
    version,
    about = "Controllable video diffusion pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// run configuration (JSON)
    #[arg(long)]
    config: PathBuf,
    /// replaces every seed in the config
    #[arg(long)]
    seed: Option<u64>,
    /// output directory for this command
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// synthesize (and ingest) clips, segment, crop and write the dataset
    Preprocess(Common),
    /// train the base denoiser
    Pretrain(Common),
    /// train the control adapter against the frozen base
    TrainControl(Common),
    /// generate controlled videos for held-out clips
    Sample(Common),
    /// score generated videos against ground truth
    Evaluate(Common),
    /// train and compare the even, end and space layouts
    AblateLayout(Common),
}

fn threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("VCTRL_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "VCTRL_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Preprocess(c) => (Command::Preprocess, c),
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::TrainControl(c) => (Command::TrainControl, c),
        Cmd::Sample(c) => (Command::Sample, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::AblateLayout(c) => (Command::AblateLayout, c),
    };
    let result = threads().and_then(|_| {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.override_seed(seed);
        }
        run(cmd, &cfg, common.out.as_deref())
    });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vctrl {}: {e}", cmd.name());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
