use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use impurity_fermi::harness::{self, Experiment, ExperimentConfig};
use impurity_fermi::{Error, Result};

#[derive(Parser)]
#[command(name = "impurity-lab", version, about = "Impurities in a dense Fermi gas: config-driven experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mediated pair potential tables and core diagnostics.
    Potential(Common),
    /// Truncated Fock-space deficit versus k_F.
    Scaling(Common),
    /// Transition-amplitude sums against their envelopes.
    Bounds(Common),
    /// Effective versus tilde dynamics rate.
    Prop2(Common),
    /// Check the interaction-profile and impurity-potential assumptions.
    Certify(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Print basis dimensions and cost estimates without running.
    #[arg(long)]
    dry_run: bool,
}

fn execute(cli: Cli) -> Result<()> {
    let (expected, common) = match &cli.command {
        Command::Potential(c) => (Some(Experiment::Potential), c),
        Command::Scaling(c) => (Some(Experiment::Scaling), c),
        Command::Bounds(c) => (Some(Experiment::Bounds), c),
        Command::Prop2(c) => (Some(Experiment::Proposition2), c),
        Command::Certify(c) => (None, c),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = ExperimentConfig::load(&common.config)?;
    let Some(expected) = expected else {
        let report = harness::certify(&cfg)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    };
    if cfg.experiment != expected {
        return Err(Error::Config(format!(
            "config is for experiment '{}', subcommand runs '{}'",
            cfg.experiment.name(),
            expected.name()
        )));
    }
    if common.dry_run {
        for line in harness::dry_run(&cfg)? {
            println!("{line}");
        }
        return Ok(());
    }
    let manifest = harness::run(&cfg, common.out.as_deref())?;
    println!(
        "{}: {} points computed, {} reused, {:.1} s -> {}",
        manifest.experiment.name(),
        manifest.points_computed,
        manifest.points_reused,
        manifest.wall_time_s,
        manifest.run_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
