//! Runs a configured cohort through the engine and writes its artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{RunConfig, TraceLevel};
use super::metrics::{compute_metrics, histogram_rows, metrics_rows, write_csv, Metrics};
use super::trace::format_record;
use crate::engine::{Engine, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::synthetic::{make_cohort, ScenarioSpec};

pub const TRACE_FILE: &str = "trace.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const HISTOGRAM_FILE: &str = "confidence_hist.csv";

/// Everything a run produced, kept in memory.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_id: String,
    pub specs: Vec<ScenarioSpec>,
    pub records: Vec<TrajectoryRecord>,
    pub metrics: Metrics,
}

pub fn run_id(cfg: &RunConfig) -> String {
    format!("{}-{}", cfg.mode.as_str(), cfg.engine.seed)
}

/// Runs the cohort without touching the filesystem.
pub fn execute(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let specs = cfg.scenarios();
    let mut sources = make_cohort(&specs)?;
    let mut engine = Engine::spawn(cfg.engine_config())?;
    engine.run(&mut sources)?;
    let id = run_id(cfg);
    let metrics = compute_metrics(
        &id,
        &specs,
        engine.records(),
        engine.token_accounting(),
        engine.select_winner(),
    );
    Ok(RunOutcome {
        run_id: id,
        specs,
        records: engine.records().to_vec(),
        metrics,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_trace(path: &Path, outcome: &RunOutcome, level: TraceLevel) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in &outcome.records {
        let steps = match level {
            TraceLevel::None => continue,
            TraceLevel::Summary => rec.trace.last().into_iter().collect::<Vec<_>>(),
            TraceLevel::Full => rec.trace.iter().collect(),
        };
        for st in steps {
            w.write_all(format_record(&outcome.run_id, rec.id, st).as_bytes())
                .map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

/// Paths of the files written by [`run`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifacts {
    pub trace: Option<PathBuf>,
    pub metrics: PathBuf,
    pub histogram: PathBuf,
}

/// Runs the cohort and writes trace, metrics and histogram files into the
/// configured output directory.
pub fn run(cfg: &RunConfig) -> Result<(RunOutcome, Artifacts)> {
    let outcome = execute(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let trace = match cfg.trace_level {
        TraceLevel::None => None,
        level => {
            let path = dir.join(TRACE_FILE);
            write_trace(&path, &outcome, level)?;
            Some(path)
        }
    };
    let metrics = dir.join(METRICS_FILE);
    write_csv(&metrics, &metrics_rows(&outcome.metrics))?;
    let histogram = dir.join(HISTOGRAM_FILE);
    write_csv(&histogram, &histogram_rows(&outcome.metrics.histogram))?;
    Ok((outcome, Artifacts { trace, metrics, histogram }))
}
