use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfzs::harness::{self, ExperimentConfig, RunResult};
use cfzs::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cfzs",
    version,
    about = "Counterfactual zero-shot classification testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Paired comparison of two finished runs (result.json or run directory).
    Compare { a: PathBuf, b: PathBuf },
    /// Write the class adjacency matrix of a config's task as CSV.
    ExportAdjacency {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the dataset of a config's first seed as JSON.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = harness::run(&cfg)?;
            println!("run {} ({})", result.run_id, cfg.model_variant.as_str());
            for (name, agg) in &result.aggregate {
                println!(
                    "  {name:<14}{:>8.2} +/- {:.2}",
                    100.0 * agg.mean,
                    100.0 * agg.stddev
                );
            }
            println!("results in {}", result.artifacts.result_json.display());
        }
        Command::Compare { a, b } => {
            let a = RunResult::load(&a)?;
            let b = RunResult::load(&b)?;
            print!("{}", harness::compare(&a, &b)?.render());
        }
        Command::ExportAdjacency { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (graph, names) = harness::adjacency_for(&cfg)?;
            write(&out, &graph.to_csv(&names)?)?;
            println!("{} classes, {} edges", graph.n(), graph.edges().len());
        }
        Command::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = harness::prepare_dataset(&cfg, cfg.seeds[0])?;
            write(&out, &ds.to_json()?)?;
            println!(
                "{} classes ({} unseen), {} train, {} test",
                ds.n_classes(),
                ds.unseen_ids.len(),
                ds.train.len(),
                ds.test.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
