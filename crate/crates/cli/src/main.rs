use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use petra_cli::{apply_seed, execute, CliError, Command, Invocation, RunConfig};

#[derive(Parser)]
#[command(name = "petra", version, about = "Train and analyse the memory-based entity tracker")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's random stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; --checkpoint resumes a saved state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pick the F1 threshold on validation and score the evaluation split.
    EvalGap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Unique-people counting error and the overwrite KL diagnostic.
    CountPeople {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Memory logs and heatmaps for selected documents.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write synthetic train, validation and test corpora.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Validation F1 across memory sizes and seeds.
    SweepMemory {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic gradients with central differences on a tiny model.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
}

fn invocation(cmd: Cmd) -> Result<Invocation, CliError> {
    let (command, common, checkpoint) = match cmd {
        Cmd::Train { common, checkpoint } => (Command::Train, common, checkpoint),
        Cmd::EvalGap { common, checkpoint } => (Command::EvalGap, common, Some(checkpoint)),
        Cmd::CountPeople { common, checkpoint } => (Command::CountPeople, common, Some(checkpoint)),
        Cmd::Visualize { common, checkpoint } => (Command::Visualize, common, Some(checkpoint)),
        Cmd::GenSynth { common } => (Command::GenSynth, common, None),
        Cmd::SweepMemory { common } => (Command::SweepMemory, common, None),
        Cmd::GradCheck { common } => (Command::GradCheck, common, None),
    };
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        apply_seed(&mut config, command, seed);
    }
    Ok(Invocation { command, config, out: common.out, checkpoint })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.exit_code() == 0 => e.exit(),
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match invocation(cli.command).and_then(|inv| execute(&inv).map(|m| (inv, m))) {
        Ok((inv, manifest)) => {
            println!("wrote {} files to {}", manifest.files.len() + 1, inv.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
