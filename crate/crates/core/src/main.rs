use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use tts_ctl::harness::{self, Mode, RunConfig, TraceLevel};
use tts_ctl::Error;

/// Run a synthetic cohort through the confidence controller and write
/// trace, metrics and histogram files.
#[derive(Debug, Parser)]
#[command(name = "ttsctl", version)]
struct Cli {
    /// Flat key = value configuration file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// scalingar (alias adaptive) or baseline
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// none, summary or full
    #[arg(long)]
    trace_level: Option<String>,
    /// Total trajectories: half good (rounded up), half doomed.
    #[arg(long)]
    cohort_size: Option<usize>,
}

fn build_config(cli: &Cli) -> tts_ctl::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.engine.seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = Mode::parse(mode)?;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(level) = &cli.trace_level {
        cfg.trace_level = TraceLevel::parse(level)?;
    }
    if let Some(n) = cli.cohort_size {
        cfg.cohort.resize(n);
        cfg.engine.k_target = n - n / 2;
        cfg.engine.m_buf = n / 2;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("ttsctl: {e}");
            return ExitCode::from(2);
        }
    };
    match harness::run(&cfg) {
        Ok((outcome, artifacts)) => {
            let m = &outcome.metrics;
            println!(
                "{}: precision {} recall {} token savings {} winner {}",
                outcome.run_id,
                harness::fmt_sig6(m.precision),
                harness::fmt_sig6(m.recall),
                harness::fmt_sig6(m.accounting.saved_fraction),
                m.winner.map_or_else(|| "none".to_string(), |w| w.to_string()),
            );
            println!("metrics written to {}", artifacts.metrics.display());
            ExitCode::SUCCESS
        }
        Err(e @ Error::InvalidConfig(_)) => {
            eprintln!("ttsctl: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("ttsctl: {e}");
            ExitCode::from(3)
        }
    }
}
