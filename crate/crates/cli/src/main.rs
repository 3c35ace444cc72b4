use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ltcil_cli::run::render_ablation;
use ltcil_cli::{cmd_ablate, cmd_report, cmd_run, CliError, Precision, RunOptions};
use ltcil_core::trainer::AblationMode;

#[derive(Parser)]
#[command(name = "ltcil", version, about = "Adapter-pool routing for long-tailed class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Numeric precision of training.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration over its task stream.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        /// full, no_routing, no_aux_pool, no_pool or finetune.
        #[arg(long)]
        mode: Option<AblationMode>,
    },
    /// Run the four ablation variants under each seed and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Summarise a finished run directory.
    Report {
        dir: PathBuf,
    },
}

fn options(c: Common, seed: Option<u64>, mode: Option<AblationMode>) -> RunOptions {
    RunOptions { config: c.config, out: c.out, seed, mode, precision: c.precision }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, seed, mode } => {
            let out = cmd_run(&options(common, seed, mode))?;
            let m = &out.summary.metrics;
            println!("{}: average {:.2}, last {:.2}", out.dir.display(), m.average, m.last);
        }
        Command::Ablate { common, seeds } => {
            let report = cmd_ablate(&options(common, None, None), &seeds)?;
            print!("{}", render_ablation(&report));
        }
        Command::Report { dir } => print!("{}", cmd_report(&dir)?.text),
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
