use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ggt_cli::pipeline;
use ggt_cli::{exit_code, ExperimentConfig, Profile};

#[derive(Parser)]
#[command(name = "ggt", version, about = "Graph-guided detection of adversarial inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overlaid on the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "smoke")]
    profile: Profile,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Caps worker threads.
    #[arg(long, global = true, env = "GGT_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ASPL-regulated relational graphs.
    Graphs,
    /// Train the original model and the pruned ensemble.
    Train,
    /// Build normal, WL and FGSM samples.
    Attack,
    /// Label the corpus with the ensemble and choose the LCR threshold.
    Calibrate,
    /// Run the sequential test and write the report.
    Detect,
    /// Run every stage.
    Reproduce,
    /// Print an existing report.
    Report,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(cli.profile, path)?,
        None => ExperimentConfig::profile(cli.profile),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = resolve(&cli)?;
    if !matches!(cli.command, Command::Report) {
        pipeline::write_resolved_config(&config)?;
    }
    match cli.command {
        Command::Graphs => {
            let m = pipeline::cmd_graphs(&config)?;
            for b in &m.bins {
                println!("bin {}: {} graphs", b.label, b.graphs.len());
            }
        }
        Command::Train => {
            let m = pipeline::cmd_train(&config)?;
            println!(
                "original validation accuracy {:.4}; {} pruned models accepted, {} rejected",
                m.original.validation_accuracy,
                m.accepted.len(),
                m.rejected.len()
            );
        }
        Command::Attack => {
            let s = pipeline::cmd_attack(&config)?;
            println!("calibration {:?}; evaluation {:?}", s.calibration, s.evaluation);
        }
        Command::Calibrate => {
            let r = pipeline::cmd_calibrate(&config)?;
            println!(
                "threshold {:.6}, sigma {:.6}",
                r.calibration.threshold, r.calibration.sigma
            );
        }
        Command::Detect | Command::Reproduce => {
            let report = if matches!(cli.command, Command::Detect) {
                pipeline::cmd_detect(&config)?
            } else {
                pipeline::cmd_reproduce(&config)?
            };
            print!("{}", report.render_text()?);
        }
        Command::Report => print!("{}", pipeline::cmd_report(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
