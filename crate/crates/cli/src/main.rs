#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

mod commands;
mod scenario;

use scenario::Scenario;

#[derive(Parser, Debug)]
#[command(name = "interfacial", version, about = "Two-phase elastic equilibrium and interface topology runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario JSON file.
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Output directory [default: the scenario's `output`, else `out`].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides the scenario's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = "INTERFACIAL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Check mesh, model, labels and settings without solving.
    Validate,
    /// Solve for the elastic equilibrium of the initial labeling.
    Equilibrium,
    /// Run the annealing search over labelings.
    Topopt,
    /// Curvature convergence on sphere, plane and cylinder.
    CurvatureTest,
}

#[derive(Serialize)]
struct ErrorReport {
    error: String,
    causes: Vec<String>,
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("configuring thread pool: {e}"))?;
    }
    #[cfg(not(feature = "parallel"))]
    if threads.is_some_and(|n| n > 1) {
        eprintln!("warning: built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn load_scenario(cli: &Cli) -> Result<Scenario> {
    let path = cli.scenario.as_deref().ok_or_else(|| anyhow!("--scenario is required for this command"))?;
    let mut s = Scenario::load(path)?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    let start = Instant::now();
    let scenario = match (cli.command, &cli.scenario) {
        (Command::CurvatureTest, None) => None,
        _ => Some(load_scenario(cli)?),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| scenario.as_ref().and_then(|s| s.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    match (cli.command, scenario) {
        (Command::Validate, Some(s)) => commands::validate(&s, &out)?,
        (Command::Equilibrium, Some(s)) => commands::equilibrium(&s, &out)?,
        (Command::Topopt, Some(s)) => commands::topopt(&s, &out)?,
        (Command::CurvatureTest, s) => commands::curvature_test(&s.map(|s| s.curvature).unwrap_or_default(), &out)?,
        (_, None) => unreachable!("scenario loaded for every other command"),
    }
    eprintln!("done in {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli).context(format!("{:?} failed", cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut chain = e.chain().map(|c| c.to_string());
            let report = ErrorReport {
                error: chain.next().unwrap_or_default(),
                causes: chain.collect(),
            };
            eprintln!("{}", serde_json::to_string_pretty(&report).expect("error report serializes"));
            ExitCode::FAILURE
        }
    }
}
