use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m2wf_harness::commands;
use m2wf_harness::config::describe;
use m2wf_harness::error::HarnessError;
use m2wf_harness::runner::RunSummary;

/// Benchmark harness for multi-stage code-generation prompting.
#[derive(Parser)]
#[command(name = "m2wf", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, judge and report every configured strategy.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/<run_id>` from the config.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Run the workflow over the configured K x M grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Run the stage-corruption ablation.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Regenerate reports from a run's records.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Print the token usage table of a run.
    Tokens {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Check a config without calling a model.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn print_summary(summary: &RunSummary) {
    println!(
        "rows written: {}, rows already present: {}, fresh completions: {}, cached completions: {}",
        summary.rows_written, summary.rows_skipped, summary.fresh_completions, summary.cached_completions
    );
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run { config, run_dir } => {
            let outcome = commands::run(&config, run_dir.as_deref())?;
            print_summary(&outcome.summary);
            println!("run directory: {}\n", outcome.run_dir.display());
            print!("{}", outcome.report.scores_table().to_markdown());
        }
        Command::Sweep { config, run_dir } => {
            let outcome = commands::sweep(&config, run_dir.as_deref())?;
            print_summary(&outcome.summary);
            println!("run directory: {}\n", outcome.run_dir.display());
            print!("{}", commands::grid_table(&outcome.grid).to_markdown());
            if let Some(best) = outcome.grid.best() {
                println!("\nbest: K={} M={} pass@1={:.2}", best.k, best.m, best.pass_at_1);
            }
        }
        Command::Ablate { config, run_dir } => {
            let outcome = commands::ablate(&config, run_dir.as_deref())?;
            print_summary(&outcome.summary);
            println!("run directory: {}\n", outcome.run_dir.display());
            print!("{}", commands::ablation_table(&outcome.rows).to_markdown());
        }
        Command::Report { run_dir } => {
            let report = commands::report(&run_dir)?;
            print!("{}", report.scores_table().to_markdown());
        }
        Command::Tokens { run_dir } => {
            print!("{}", commands::tokens(&run_dir)?.to_markdown());
        }
        Command::Validate { config } => {
            let (loaded, _) = commands::load_config(&config, None)?;
            for (key, value) in describe(&loaded)? {
                println!("{key}: {value}");
            }
            println!("config is valid");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::new(e).context("m2wf failed"));
            ExitCode::from(code)
        }
    }
}
