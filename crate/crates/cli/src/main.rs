use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

/// Fit, prune, evaluate and render fuzzy CSG trees.
#[derive(Debug, Parser)]
#[command(name = "fuzzycsg", version)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a random full tree to a target.
    Fit(commands::FitArgs),
    /// Remove redundant subtrees from a tree.
    Prune(commands::PruneArgs),
    /// Evaluate a tree at points.
    Eval(commands::EvalArgs),
    /// Render a slice of a tree to a PGM image.
    RenderSlice(commands::RenderArgs),
    /// Sample a tree on a regular grid.
    ExportGrid(commands::GridArgs),
    /// Fit one target under several boolean modes.
    Compare(commands::CompareArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code_for(&err))
        }
    }
}
