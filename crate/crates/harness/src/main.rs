use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsl_harness::config::ExperimentConfig;
use fsl_harness::report::cmd_report;
use fsl_harness::run::{cmd_eval, cmd_generate_data, cmd_train, Overrides};
use fsl_harness::Result;

#[derive(Parser)]
#[command(name = "fsl", version, about = "Few-shot meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        Ok(Overrides {
            seed: self.seed,
            out: self.out.clone(),
        }
        .apply(base))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Export the synthetic datasets of a config as image directories.
    GenerateData(Common),
    /// Meta-train (or pre-train) every repeat.
    Train(Common),
    /// Meta-test the trained checkpoints.
    Eval(Common),
    /// Aggregate evaluated runs into a CSV table.
    Report {
        /// Run directories, report files or directories of runs.
        runs: Vec<PathBuf>,
        /// Config whose output directory holds the runs, when no runs are listed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(c) => {
            for (dir, m) in cmd_generate_data(&c.load()?)? {
                println!(
                    "{}: {} classes, {} images, sha256 {}",
                    dir.display(),
                    m.classes,
                    m.images,
                    m.sha256
                );
            }
        }
        Command::Train(c) => {
            for run in cmd_train(&c.load()?)? {
                match run.best_val {
                    Some(v) => println!("{}: best validation accuracy {v:.4}", run.dir.display()),
                    None => println!("{}: trained without validation", run.dir.display()),
                }
            }
        }
        Command::Eval(c) => {
            for r in cmd_eval(&c.load()?)? {
                println!(
                    "{} {} repeat {}: {:.4} ± {:.4} over {} tasks",
                    r.method, r.scenario, r.repeat, r.mean_accuracy, r.ci_half_width, r.n_tasks
                );
            }
        }
        Command::Report { runs, config, out } => {
            let runs = if runs.is_empty() {
                let cfg = match config {
                    Some(p) => ExperimentConfig::load(&p)?,
                    None => ExperimentConfig::default(),
                };
                vec![cfg.output_dir]
            } else {
                runs
            };
            print!("{}", cmd_report(&runs, out.as_deref())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
