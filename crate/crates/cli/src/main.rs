use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use obliq_cli::acceptance::{run_acceptance, Tier};
use obliq_cli::config::{load_config, ExperimentConfig};
use obliq_cli::pipeline::{error_summary, execute, write_run, Stage, Verdict};
use obliq_cli::CliError;

#[derive(Parser)]
#[command(name = "obliq", version, about = "Reflected BSDE and optimal switching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Reflected lattice solve.
    Solve(RunArgs),
    /// Penalty schedule against the reflected solve.
    Penalize(RunArgs),
    /// Optimal strategy extraction and verification.
    Strategy(RunArgs),
    /// Monte Carlo pricing of the diffusion under switching strategies.
    Simulate(RunArgs),
    /// Grid solve of the variational inequality and lattice cross-check.
    Pde(RunArgs),
    /// Every stage the configuration has a block for.
    Run(RunArgs),
    /// Acceptance suite.
    Accept {
        #[arg(long, value_enum, default_value = "quick")]
        tier: Tier,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides the Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut config = load_config(&args.config, std::env::vars())?;
    if let (Some(seed), Some(mc)) = (args.seed, config.solver.monte_carlo.as_mut()) {
        mc.seed = seed;
    }
    Ok(config)
}

fn run(args: &RunArgs, verb: Option<Stage>) -> ExitCode {
    let config = match load(args) {
        Ok(c) => c,
        Err(e) => return fail(&args.out, None, &e),
    };
    let stages = verb.map_or_else(|| Stage::configured(&config), Stage::plan);
    match execute(&config, &stages) {
        Ok(out) => match write_run(&args.out, &out.summary, &out.artifacts) {
            Ok(dir) => {
                for stage in &out.summary.stages {
                    for c in &stage.checks {
                        let mark = if c.passed { "PASS" } else { "FAIL" };
                        println!("{mark} {}/{} measured={:e} tolerance={:e}", stage.stage, c.name, c.measured, c.tolerance);
                    }
                }
                println!("{} {}", out.summary.verdict, dir.display());
                ExitCode::from(out.summary.verdict.exit_code() as u8)
            }
            Err(e) => fail(&args.out, Some(&config), &e),
        },
        Err(e) => fail(&args.out, Some(&config), &e),
    }
}

fn fail(out: &std::path::Path, config: Option<&ExperimentConfig>, err: &CliError) -> ExitCode {
    let summary = error_summary(config, err);
    let report = serde_json::to_string(&summary.error).unwrap_or_default();
    eprintln!("{report}");
    if config.is_some() {
        let _ = write_run(out, &summary, &[]);
    }
    ExitCode::from(Verdict::Error.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Solve(a) => run(a, Some(Stage::Solve)),
        Command::Penalize(a) => run(a, Some(Stage::Penalize)),
        Command::Strategy(a) => run(a, Some(Stage::Strategy)),
        Command::Simulate(a) => run(a, Some(Stage::Simulate)),
        Command::Pde(a) => run(a, Some(Stage::Pde)),
        Command::Run(a) => run(a, None),
        Command::Accept { tier, out } => {
            let report = match run_acceptance(*tier, std::env::vars(), |c| println!("{}", c.line())) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("{}", serde_json::to_string(&e.to_report()).unwrap_or_default());
                    return ExitCode::from(2);
                }
            };
            if let Some(path) = out {
                let text = serde_json::to_vec_pretty(&report).expect("report serializes");
                if let Err(e) = std::fs::write(path, text) {
                    eprintln!("{}", serde_json::to_string(&CliError::from(e).to_report()).unwrap_or_default());
                    return ExitCode::from(2);
                }
            }
            ExitCode::from(if report.passed { 0 } else { 1 })
        }
    }
}
