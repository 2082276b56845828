use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ofms_core::sim::{self, RunConfig};

#[derive(Parser)]
#[command(name = "ofms", version, about = "Online federated model selection and fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write trace.csv, metrics.json and checkpoint.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run client phases on one thread.
        #[arg(long)]
        serial: bool,
    },
    /// Seed-averaged metrics over a seed range and an optional budget grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Half-open range such as `0..20`, or a single seed.
        #[arg(long, default_value = "0..20")]
        seeds: String,
        /// Comma-separated common budgets, e.g. `2,5,10`.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
        /// Write the JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print tuned rates and theoretical bounds without running.
    Bounds {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = text.split_once("..") {
        let start: u64 = a.trim().parse().with_context(|| format!("bad seed range start in {text:?}"))?;
        let end: u64 = b.trim().parse().with_context(|| format!("bad seed range end in {text:?}"))?;
        if end <= start {
            bail!("seed range {text:?} is empty");
        }
        Ok((start..end).collect())
    } else {
        Ok(vec![text.trim().parse().with_context(|| format!("bad seed {text:?}"))?])
    }
}

fn load(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            serial,
        } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if serial {
                cfg.parallel = false;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .context("no output directory: pass --out or set output_dir")?;
            let output = sim::run(&cfg)?;
            sim::write_artifacts(&dir, &output)?;
            let m = &output.metrics;
            println!(
                "{} seed {}: mean client regret {:.4}, artifacts in {}",
                m.algorithm,
                m.seed,
                m.mean_client_regret,
                dir.display()
            );
            if !m.feasible() {
                eprintln!(
                    "infeasible run: {} memory, {} bandwidth violations",
                    m.memory_violations, m.bandwidth_violations
                );
                return Ok(ExitCode::from(2));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            seeds,
            budgets,
            out,
        } => {
            let cfg = load(&config)?;
            let seeds = parse_seeds(&seeds)?;
            let points = sim::sweep(&cfg, &seeds, budgets.as_deref())?;
            let text = serde_json::to_string_pretty(&points)?;
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{text}"),
            }
            let violations: u64 = points.iter().map(|p| p.memory_violations + p.bandwidth_violations).sum();
            Ok(if violations == 0 { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Bounds { config } => {
            let report = sim::bounds(&load(&config)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
