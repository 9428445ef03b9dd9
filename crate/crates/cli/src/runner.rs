//! Runs one configuration over a manifest and writes its result directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use volprop::config::RunConfig;
use volprop::dataset::Manifest;
use volprop::engine::SegmentationBackend;
use volprop::metrics::{aggregate, json_report, render_table, write_records_csv, MetricsRecord};
use volprop::pipeline::run_entry;
use volprop::profiler::{self, ReportFormat, StageTiming};

/// Written last; a result directory without it is incomplete.
pub const DONE: &str = "DONE";

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    pub workers: usize,
    pub keep_going: bool,
    pub profile: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub case_id: String,
    pub structure: String,
    pub error: String,
}

pub struct Outcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<Failure>,
}

type EntryResult = std::result::Result<(MetricsRecord, Vec<StageTiming>), String>;

/// Runs every manifest entry, `workers` at a time. Results keep manifest
/// order. Without `keep_going` the first failure stops the run.
pub fn run_manifest(
    cfg: &RunConfig,
    backend: &dyn SegmentationBackend,
    manifest: &Manifest,
    base: &Path,
    opts: RunOptions,
) -> Result<(Outcome, Vec<StageTiming>)> {
    let n = manifest.entries.len();
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<EntryResult>>> = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..opts.workers.max(1).min(n.max(1)) {
            s.spawn(|| loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let entry = &manifest.entries[i];
                let r = run_entry(cfg, backend, entry, base, opts.profile)
                    .map(|r| (r.record, r.timings))
                    .map_err(|e| e.to_string());
                if r.is_err() && !opts.keep_going {
                    stop.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::new();
    for (entry, slot) in manifest.entries.iter().zip(slots.into_inner().expect("result lock")) {
        match slot {
            Some(Ok((r, t))) => {
                records.push(r);
                timings.extend(t);
            }
            Some(Err(e)) => {
                if !opts.keep_going {
                    bail!("{}/{}: {e}", entry.case_id, entry.target_class);
                }
                eprintln!("warning: {}/{} failed: {e}", entry.case_id, entry.target_class);
                failures.push(Failure {
                    case_id: entry.case_id.clone(),
                    structure: entry.target_class.clone(),
                    error: e,
                });
            }
            None => {}
        }
    }
    Ok((Outcome { records, failures }, timings))
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes config, records, metrics and (when profiled) timings into `dir`,
/// then the completion marker.
pub fn write_results(dir: &Path, cfg: &RunConfig, outcome: &Outcome, timings: &[StageTiming]) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.json"), cfg.to_json_pretty() + "\n")?;
    std::fs::write(dir.join("config_id"), cfg.config_id() + "\n")?;
    write_jsonl(&dir.join("records.jsonl"), &outcome.records)?;
    write_records_csv(&outcome.records, std::fs::File::create(dir.join("records.csv"))?)?;
    write_jsonl(&dir.join("failures.jsonl"), &outcome.failures)?;
    let report = json_report(&outcome.records);
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let table = match aggregate(&outcome.records) {
        Ok(agg) => render_table(&agg),
        Err(_) => "no records\n".to_string(),
    };
    std::fs::write(dir.join("metrics.md"), table)?;
    if !timings.is_empty() {
        profiler::write_timings_csv(timings, std::fs::File::create(dir.join("timings.csv"))?)?;
        profiler::report(timings, ReportFormat::Csv, &dir.join("stage_summary.csv"))?;
    }
    std::fs::write(dir.join(DONE), "")?;
    Ok(())
}

/// A finished result directory.
pub struct Completed {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub records: Vec<MetricsRecord>,
}

pub fn load_completed(dir: &Path) -> Result<Option<Completed>> {
    if !dir.join(DONE).is_file() {
        return Ok(None);
    }
    let config = RunConfig::load(&dir.join("config.json"))?;
    let text = std::fs::read_to_string(dir.join("records.jsonl"))?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<MetricsRecord>, _>>()
        .with_context(|| format!("parsing {}", dir.join("records.jsonl").display()))?;
    Ok(Some(Completed {
        dir: dir.to_path_buf(),
        config,
        records,
    }))
}
