use std::path::PathBuf;
use std::process::ExitCode;

use ccp_dml::config::ExperimentConfig;
use ccp_dml::runner;
use clap::{Parser, Subcommand};

/// Train and evaluate chance-constrained proxy-based metric learning models.
#[derive(Parser)]
#[command(name = "ccp-dml", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per a config file and write trace.csv, summary.json,
    /// embeddings.csv and model.ckpt.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print metric deltas (b − a) between two runs as JSON.
    Compare {
        /// summary.json or run directory.
        a: PathBuf,
        b: PathBuf,
    },
    /// Retrieval metrics of an embeddings.csv dump.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        /// Only rows of this split (train, val or test).
        #[arg(long)]
        split: Option<String>,
    },
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

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            let res = runner::run(&cfg, &dir)?;
            let s = &res.summary;
            println!(
                "{}: {} steps, {} projections, test MAP@R {:.4} P@1 {:.4} -> {}",
                s.mode,
                s.steps,
                s.projections,
                s.best.map_at_r,
                s.best.p_at_1,
                dir.display()
            );
        }
        Command::Compare { a, b } => {
            let cmp = runner::compare(&a, &b)?;
            for w in &cmp.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", serde_json::to_string_pretty(&cmp)?);
        }
        Command::Eval { embeddings, split } => {
            let report = runner::eval_embeddings(&embeddings, split.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
