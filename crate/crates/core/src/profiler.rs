//! Stage-level runtime instrumentation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("no timings to report")]
    Empty,
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV failure: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON failure: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoding every frame of a pass up front.
    StateInit,
    Encode,
    MemoryAttention,
    MemoryEncode,
    Decode,
    /// Attention + decode + memory encode for one frame.
    Tracking,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::StateInit => "state_init",
            Stage::Encode => "encode",
            Stage::MemoryAttention => "memory_attention",
            Stage::MemoryEncode => "memory_encode",
            Stage::Decode => "decode",
            Stage::Tracking => "tracking",
        };
        f.write_str(s)
    }
}

/// One timed stage. Run-level stages have no slice index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub run_id: String,
    pub config_id: String,
    pub stage: Stage,
    pub slice_index: Option<usize>,
    pub duration_ms: f64,
}

fn millis(d: Duration) -> f64 {
    d.as_nanos() as f64 / 1e6
}

/// Span collector handed to backends for the sub-stages of one frame.
#[derive(Debug, Default)]
pub struct StageClock {
    enabled: bool,
    spans: Vec<(Stage, Duration)>,
}

impl StageClock {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            spans: Vec::new(),
        }
    }

    pub fn measure<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.spans.push((stage, start.elapsed()));
        out
    }

    pub fn spans(&self) -> &[(Stage, Duration)] {
        &self.spans
    }
}

/// Per-run timing collector. A disabled profiler records nothing.
#[derive(Debug, Clone)]
pub struct Profiler {
    enabled: bool,
    run_id: String,
    config_id: String,
    timings: Vec<StageTiming>,
}

impl Profiler {
    pub fn new(run_id: impl Into<String>, config_id: impl Into<String>) -> Self {
        Self {
            enabled: true,
            run_id: run_id.into(),
            config_id: config_id.into(),
            timings: Vec::new(),
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            run_id: String::new(),
            config_id: String::new(),
            timings: Vec::new(),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn clock(&self) -> StageClock {
        StageClock::new(self.enabled)
    }

    fn push(&mut self, stage: Stage, slice_index: Option<usize>, d: Duration) {
        self.timings.push(StageTiming {
            run_id: self.run_id.clone(),
            config_id: self.config_id.clone(),
            stage,
            slice_index,
            duration_ms: millis(d),
        });
    }

    /// Records an externally measured span.
    pub fn record_span(&mut self, stage: Stage, slice_index: Option<usize>, d: Duration) {
        if self.enabled {
            self.push(stage, slice_index, d);
        }
    }

    /// Empty collector with the same identity, for a concurrent pass.
    pub fn fork(&self) -> Profiler {
        Profiler {
            enabled: self.enabled,
            run_id: self.run_id.clone(),
            config_id: self.config_id.clone(),
            timings: Vec::new(),
        }
    }

    pub fn measure<T>(&mut self, stage: Stage, slice_index: Option<usize>, f: impl FnOnce() -> T) -> T {
        if !self.enabled {
            return f();
        }
        let start = Instant::now();
        let out = f();
        self.push(stage, slice_index, start.elapsed());
        out
    }

    /// Records a frame's sub-stage spans and its enclosing tracking time.
    pub fn absorb(&mut self, clock: StageClock, slice_index: usize, tracking: Duration) {
        if !self.enabled {
            return;
        }
        for (stage, d) in clock.spans {
            self.push(stage, Some(slice_index), d);
        }
        self.push(Stage::Tracking, Some(slice_index), tracking);
    }

    pub fn timings(&self) -> &[StageTiming] {
        &self.timings
    }

    pub fn merge(&mut self, other: Profiler) {
        self.timings.extend(other.timings);
    }

    pub fn record(self) -> Vec<StageTiming> {
        self.timings
    }
}

/// Linear-interpolation quantile of sorted data, `q` in `[0, 1]`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub config_id: String,
    pub stage: Stage,
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub q1_ms: f64,
    pub q3_ms: f64,
    pub max_ms: f64,
}

/// Per `(config, stage)` statistics, sorted by config then stage.
pub fn summarize(timings: &[StageTiming]) -> Vec<StageSummary> {
    let mut groups: BTreeMap<(&str, Stage), Vec<f64>> = BTreeMap::new();
    for t in timings {
        groups.entry((&t.config_id, t.stage)).or_default().push(t.duration_ms);
    }
    groups
        .into_iter()
        .map(|((config_id, stage), mut v)| {
            v.sort_by(f64::total_cmp);
            StageSummary {
                config_id: config_id.to_string(),
                stage,
                count: v.len(),
                mean_ms: v.iter().sum::<f64>() / v.len() as f64,
                median_ms: quantile(&v, 0.5),
                p95_ms: quantile(&v, 0.95),
                min_ms: v[0],
                q1_ms: quantile(&v, 0.25),
                q3_ms: quantile(&v, 0.75),
                max_ms: v[v.len() - 1],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Raw timings as CSV: `run_id,config_id,stage,slice_index,duration_ms`.
pub fn write_timings_csv(timings: &[StageTiming], out: impl Write) -> Result<(), ProfileError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run_id", "config_id", "stage", "slice_index", "duration_ms"])?;
    for t in timings {
        w.write_record([
            t.run_id.clone(),
            t.config_id.clone(),
            t.stage.to_string(),
            t.slice_index.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.3}", t.duration_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-stage summary to `path`.
pub fn report(timings: &[StageTiming], format: ReportFormat, path: &Path) -> Result<Vec<StageSummary>, ProfileError> {
    if timings.is_empty() {
        return Err(ProfileError::Empty);
    }
    let summary = summarize(timings);
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            for s in &summary {
                w.serialize(s)?;
            }
            w.flush()?;
        }
        ReportFormat::Json => {
            let mut file = file;
            serde_json::to_writer_pretty(&mut file, &summary)?;
            file.flush()?;
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn timing(config: &str, stage: Stage, ms: f64) -> StageTiming {
        StageTiming {
            run_id: "r".into(),
            config_id: config.into(),
            stage,
            slice_index: Some(0),
            duration_ms: ms,
        }
    }

    #[test]
    fn disabled_profiler_records_nothing() {
        let mut p = Profiler::disabled();
        assert_eq!(p.measure(Stage::Encode, Some(0), || 7), 7);
        let mut clock = p.clock();
        clock.measure(Stage::Decode, || ());
        p.absorb(clock, 0, Duration::from_millis(1));
        assert!(p.record().is_empty());
    }

    #[test]
    fn enabled_profiler_records_spans() {
        let mut p = Profiler::new("run", "cfg");
        let mut clock = p.clock();
        clock.measure(Stage::MemoryAttention, || ());
        clock.measure(Stage::Decode, || ());
        p.absorb(clock, 3, Duration::from_micros(20));
        let t = p.record();
        assert_eq!(t.len(), 3);
        assert_eq!(t[2].stage, Stage::Tracking);
        assert!(t.iter().all(|x| x.duration_ms >= 0.0 && x.slice_index == Some(3)));
    }

    #[test]
    fn single_timing_summary() {
        let s = summarize(&[timing("a", Stage::Encode, 4.0)]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_ms, 4.0);
        assert_eq!(s[0].median_ms, 4.0);
    }

    #[test]
    fn configs_are_grouped() {
        let t = vec![
            timing("a", Stage::Tracking, 1.0),
            timing("b", Stage::Tracking, 2.0),
            timing("a", Stage::Tracking, 3.0),
        ];
        let s = summarize(&t);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].config_id.as_str(), s[0].mean_ms), ("a", 2.0));
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let mut state = 7u64;
        let values: Vec<f64> = (0..101)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 40) as f64 / 1000.0
            })
            .collect();
        let t: Vec<_> = values.iter().map(|&v| timing("a", Stage::Decode, v)).collect();
        let s = &summarize(&t)[0];
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        // 101 samples: quantiles at exact ranks
        assert_eq!(s.median_ms, sorted[50]);
        assert_eq!(s.q1_ms, sorted[25]);
        assert_eq!(s.q3_ms, sorted[75]);
        assert_eq!(s.p95_ms, sorted[95]);
        assert_eq!(s.min_ms, sorted[0]);
        assert_eq!(s.max_ms, sorted[100]);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }

    #[test]
    fn csv_columns() {
        let mut buf = Vec::new();
        write_timings_csv(&[timing("a", Stage::MemoryEncode, 0.0126)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "run_id,config_id,stage,slice_index,duration_ms\nr,a,memory_encode,0,0.013\n");
    }

    #[test]
    fn report_requires_timings() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            report(&[], ReportFormat::Json, &dir.path().join("x.json")),
            Err(ProfileError::Empty)
        ));
        let s = report(&[timing("a", Stage::Decode, 1.0)], ReportFormat::Csv, &dir.path().join("x.csv")).unwrap();
        assert_eq!(s.len(), 1);
    }
}
