use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ienet_cli::commands::{cmd_eval, cmd_report, cmd_train};
use ienet_cli::{tune_allocator, CliError};

#[derive(Parser)]
#[command(name = "ienet", version, about = "Train and evaluate weight-shared sub-network ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Jointly train every sub-network described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint on its test set and print JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the dataset from this config instead of the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare finished runs from their metrics CSV files.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed_override } => {
            let outcome = cmd_train(&config, out.as_deref(), seed_override, &mut |r| {
                eprintln!(
                    "epoch {:>3}  {:<9}  lr {:.4}  ensemble {:.4}  S {:.4}  [{:.0}s]",
                    r.epoch, r.combiner, r.lr, r.ensemble_acc, r.similarity, r.wall_seconds
                );
            })?;
            println!("{}", outcome.eval.to_json());
        }
        Command::Eval { checkpoint, config, out } => {
            println!("{}", cmd_eval(&checkpoint, config.as_deref(), out.as_deref())?.to_json());
        }
        Command::Report { metrics, out } => print!("{}", cmd_report(&metrics, out.as_deref())?),
    }
    Ok(())
}

fn main() -> ExitCode {
    tune_allocator();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
