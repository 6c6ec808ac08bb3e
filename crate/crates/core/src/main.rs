use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smallinit::runner::config::{ExperimentConfig, ValidateConfig};
use smallinit::runner::{self, criteria, RunOptions};
use smallinit::Error;

#[derive(Parser)]
#[command(name = "smallinit", version, about = "Small-initialization transformer dynamics lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Print the card for a scenario.
    Describe { scenario: String },
    /// Run the acceptance suite and print a pass/fail table.
    Validate {
        #[command(flatten)]
        overrides: Overrides,
        /// Skip the in-process repeat used for the determinism check.
        #[arg(long)]
        no_rerun: bool,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Comma-separated seeds, e.g. `0,1,2`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Overrides {
    fn options(self) -> RunOptions {
        RunOptions {
            output_dir: self.output_dir,
            seeds: self.seeds,
            threads: self.threads,
        }
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Describe { scenario } => {
            println!("{}", runner::describe(&scenario)?);
            Ok(())
        }
        Command::Run { config, overrides } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            overrides.options().apply(&mut cfg)?;
            let report = runner::run(&cfg)?;
            if let Some(results) = &report.criteria {
                print!("{}", criteria::table(results));
            }
            println!("wrote {} (content hash {})", report.output_dir.display(), report.content_hash);
            Ok(())
        }
        Command::Validate { overrides, no_rerun } => {
            let mut cfg = ExperimentConfig::validate(0);
            cfg.validate = Some(ValidateConfig { rerun: !no_rerun });
            overrides.options().apply(&mut cfg)?;
            let report = runner::run(&cfg)?;
            print!("{}", criteria::table(report.criteria.as_deref().unwrap_or_default()));
            println!("wrote {} (content hash {})", report.output_dir.display(), report.content_hash);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
