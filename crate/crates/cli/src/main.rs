use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdeflow_cli::{run, CliError, ExperimentConfig, Knobs, RunManifest};

#[derive(Parser)]
#[command(
    name = "sdeflow",
    version,
    about = "Stochastic flows for SDEs with Hölder drift"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hölder seminorm, growth and ellipticity diagnostics on a probe cloud.
    CheckHypotheses(Invocation),
    /// Euler–Maruyama paths.
    Simulate(Invocation),
    /// Monte Carlo ψ and Dψ at query points.
    Resolve(Invocation),
    /// Smallest ladder λ with a certified ‖Dψ‖ ≤ gamma.
    SelectLambda(Invocation),
    /// Flow and flow derivative, directly or through the transform.
    Flow(Invocation),
    /// Flows of mollified drifts against the rough one.
    Stability(Invocation),
    /// Bismut–Elworthy–Li gradient of the semigroup.
    Bel(Invocation),
    /// BEL against a finite difference on coupled paths.
    FdCheck(Invocation),
    /// Log-log slope of the semigroup gradient in t.
    DecayProbe(Invocation),
    /// The full acceptance battery.
    Suite(Invocation),
}

#[derive(Args)]
struct Invocation {
    /// Master seed; module seeds are derived from it by label.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; never changes any emitted value.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Reduced budgets with widened tolerances.
    #[arg(long, global = true)]
    fast: bool,
    /// JSON config; flags win over its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    knobs: Knobs,
}

impl Command {
    fn split(self) -> (&'static str, Invocation) {
        match self {
            Command::CheckHypotheses(i) => ("check-hypotheses", i),
            Command::Simulate(i) => ("simulate", i),
            Command::Resolve(i) => ("resolve", i),
            Command::SelectLambda(i) => ("select-lambda", i),
            Command::Flow(i) => ("flow", i),
            Command::Stability(i) => ("stability", i),
            Command::Bel(i) => ("bel", i),
            Command::FdCheck(i) => ("fd-check", i),
            Command::DecayProbe(i) => ("decay-probe", i),
            Command::Suite(i) => ("suite", i),
        }
    }
}

fn config(inv: Invocation) -> Result<ExperimentConfig, CliError> {
    let file = match &inv.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    let mut flags = inv.knobs.into_config();
    flags.seed = inv.seed;
    flags.out = inv.out;
    flags.workers = inv.workers;
    flags.fast = inv.fast.then_some(true);
    Ok(file.overlay(&flags))
}

fn print_checks(m: &RunManifest) {
    for c in &m.checks {
        println!(
            "{} {}: {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
}

fn main() -> ExitCode {
    let (sub, inv) = Cli::parse().command.split();
    let cfg = match config(inv) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("sdeflow {sub}: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(sub, &cfg) {
        Ok(m) => {
            print_checks(&m);
            println!("{sub}: ok ({:.1}s)", m.wall_clock_seconds);
            ExitCode::SUCCESS
        }
        Err(e) => {
            if let (CliError::Acceptance(_), Ok(m)) = (&e, RunManifest::read(&cfg.out_dir(sub))) {
                print_checks(&m);
            }
            eprintln!("sdeflow {sub}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
