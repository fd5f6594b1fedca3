//! `cflsim run`: one simulation with streamed event log and artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use cfl_core::orchestrator::{
    run_with_observer, summarize, write_event, write_metrics_csv, ExperimentConfig, RoundRecord, RunSummary,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const EVENTS: &str = "events.jsonl";
pub const SUMMARY: &str = "summary.json";
pub const METRICS: &str = "metrics.csv";
pub const MANIFEST: &str = "manifest.json";

/// File names relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub events: String,
    pub summary: Option<String>,
    pub metrics: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

/// Everything needed to repeat the run: `cflsim run --config manifest.json`
/// reads the config snapshot back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Overrides already folded into `config`, kept for the record.
    pub overrides: Vec<String>,
    pub artifacts: Artifacts,
    pub status: RunStatus,
    pub error: Option<String>,
    pub rounds_run: usize,
    pub wall_clock_s: f64,
}

/// `summary.json`: the run summary plus the overrides applied on the
/// command line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryFile {
    #[serde(flatten)]
    pub summary: RunSummary,
    pub overrides: Vec<String>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| CliError::io(path, e))
}

fn write_metrics(path: &Path, records: &[RoundRecord]) -> Result<(), CliError> {
    let mut f = create(path)?;
    write_metrics_csv(&mut f, records)?;
    f.flush().map_err(|e| CliError::io(path, e))
}

/// Runs `cfg`, writing every artifact into `out`. On a runtime error the
/// event log, the metrics of the completed rounds and a `failed` manifest
/// stay on disk.
pub fn execute(cfg: &ExperimentConfig, overrides: &[String], out: &Path) -> Result<RunSummary, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let started = Instant::now();
    let events_path = out.join(EVENTS);
    let mut events = create(&events_path)?;
    let mut records = Vec::new();
    let result = run_with_observer(cfg, |r| {
        write_event(&mut events, r)?;
        events.flush()?;
        log::debug!("round {} done, {} clusters", r.round, r.clusters.len());
        records.push(r.clone());
        Ok(())
    });
    drop(events);
    write_metrics(&out.join(METRICS), &records)?;

    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg.clone(),
        overrides: overrides.to_vec(),
        artifacts: Artifacts { events: EVENTS.into(), summary: None, metrics: METRICS.into() },
        status: RunStatus::Failed,
        error: None,
        rounds_run: records.len(),
        wall_clock_s: 0.0,
    };
    let summary = result.and_then(|outcome| summarize(cfg, &outcome));
    let summary = match summary {
        Ok(s) => s,
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.wall_clock_s = started.elapsed().as_secs_f64();
            write_json(&out.join(MANIFEST), &manifest)?;
            return Err(e.into());
        }
    };
    let file = SummaryFile { summary, overrides: overrides.to_vec() };
    write_json(&out.join(SUMMARY), &file)?;
    manifest.artifacts.summary = Some(SUMMARY.into());
    manifest.status = RunStatus::Completed;
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(file.summary)
}
