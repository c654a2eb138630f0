use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dacsm::{cmd_eval, cmd_train, cmd_verify, RunArgs};

#[derive(Parser)]
#[command(
    name = "dacsm",
    version,
    about = "Cross-attention domain adaptation on synthetic two-domain data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunFlags {
    /// TOML run configuration; all fields default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted config key, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seeds both data generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<RunFlags> for RunArgs {
    fn from(f: RunFlags) -> Self {
        RunArgs {
            config: f.config,
            overrides: f.set,
            seed: f.seed,
            out: f.out,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write metrics.csv, summary.json and checkpoint.json.
    Train(RunFlags),
    /// Score a checkpoint on the configured target domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Run a property suite: all, appendix-a, appendix-b, appendix-c, gradients.
    Verify { suite: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut out = std::io::stdout();
    let code = match cli.command {
        Command::Train(f) => cmd_train(&f.into(), &mut out),
        Command::Eval { checkpoint, flags } => cmd_eval(&checkpoint, &flags.into(), &mut out),
        Command::Verify { suite } => cmd_verify(&suite, &mut out),
    };
    ExitCode::from(code as u8)
}
