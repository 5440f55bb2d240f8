use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hptransfer::experiment::{self as ex, Context, ExperimentConfig, Outcome};
use hptransfer::Error;

#[derive(Parser)]
#[command(name = "hptx", about = "Hyperparameter transfer experiments")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Recompute cells already recorded as done.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    Train,
    Decompose,
    Truncate,
    Mci,
    #[command(subcommand)]
    Rf(RfCmd),
    #[command(subcommand)]
    Gridsim(GridCmd),
    Fit,
    Report,
}

#[derive(Subcommand)]
enum RfCmd {
    Curve,
    Rates,
    Mc,
    ClosedForms,
}

#[derive(Subcommand)]
enum GridCmd {
    Run,
    Frontier,
}

fn run(cli: &Cli) -> Result<Outcome, Error> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let cfg = ExperimentConfig::load(path)?;
    let ctx = Context::new(cfg, cli.out.clone(), cli.seed, cli.workers, cli.force)?;
    eprintln!("config {} -> {}", &ctx.hash[..16], ctx.root.display());
    match &cli.cmd {
        Cmd::Train => ex::cmd_train(&ctx),
        Cmd::Decompose => ex::cmd_decompose(&ctx),
        Cmd::Truncate => ex::cmd_truncate(&ctx),
        Cmd::Mci => ex::cmd_mci(&ctx),
        Cmd::Rf(RfCmd::Curve) => ex::cmd_rf_curve(&ctx),
        Cmd::Rf(RfCmd::Rates) => ex::cmd_rf_rates(&ctx),
        Cmd::Rf(RfCmd::Mc) => ex::cmd_rf_mc(&ctx),
        Cmd::Rf(RfCmd::ClosedForms) => ex::cmd_rf_closed_forms(&ctx),
        Cmd::Gridsim(GridCmd::Run) => ex::cmd_gridsim_run(&ctx),
        Cmd::Gridsim(GridCmd::Frontier) => ex::cmd_gridsim_frontier(&ctx),
        Cmd::Fit => ex::cmd_fit(&ctx),
        Cmd::Report => ex::cmd_report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(o) => {
            for p in &o.artifacts {
                println!("{}", p.display());
            }
            for f in &o.failed {
                eprintln!("failed: {f}");
            }
            for p in o.missing() {
                eprintln!("missing: {}", p.display());
            }
            if o.complete() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(3)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
