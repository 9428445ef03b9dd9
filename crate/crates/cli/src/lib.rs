//! `volprop` command-line interface.

pub mod grid;
pub mod report;
pub mod runner;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use volprop::config::{BackendKind, ConfigError, RunConfig};
use volprop::dataset::{build_split, overlap, scan_dataset, DatasetError, Manifest, RuleTable, Split};
use volprop::metrics::Stat;
use volprop::phantom::{drifting_tube_with_distractor, sphere};
use volprop::pipeline::{build_backend, write_phantom_dataset, write_phantoms};

use crate::grid::{Grid, GridError};
use crate::runner::{load_completed, run_manifest, write_results, RunOptions};

/// Exit status for invalid input (config, grid, manifest, arguments).
pub const EXIT_INVALID: i32 = 2;
/// Exit status for failures while running.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "volprop", version, about = "Slice-propagation segmentation of CT volumes and evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Exec {
    /// Manifest (JSON lines); paths inside are relative to its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest entries processed in parallel.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Record failing entries and continue.
    #[arg(long)]
    pub keep_going: bool,
    /// Record per-stage timings.
    #[arg(long)]
    pub profile: bool,
    /// `synthetic` or `onnx:<model dir>`; overrides the config.
    #[arg(long)]
    pub backend: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one configuration over a manifest.
    Run {
        /// Config JSON path, or `preset:<name>`.
        #[arg(long)]
        config: String,
        #[command(flatten)]
        exec: Exec,
    },
    /// Expand an ablation grid and run every configuration not yet completed.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        exec: Exec,
        /// Print the expansion without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Summarize completed results under a directory.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Baseline config name or id for Δ Dice.
        #[arg(long, default_value = "baseline")]
        baseline: String,
        /// Config compared against the baseline in the per-class table.
        #[arg(long)]
        compare: Option<String>,
    },
    /// Print a preset configuration.
    Preset { name: String },
    /// Write synthetic phantoms and their manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PhantomKind::Ellipsoids)]
        kind: PhantomKind,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate bone labels of a dataset and draw a balanced split.
    Curate {
        /// Dataset root with `<case>/ct.nii.gz` and `<case>/segmentations/`.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ablation500")]
        split: Split,
        /// Entries per class; defaults to the split's size.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Rule table JSON; defaults to the bundled bone rules.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Report `(case, class)` pairs shared with this manifest.
        #[arg(long)]
        against: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    Ellipsoids,
    Sphere,
    Tube,
}

pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_invalid_input(&e) {
                EXIT_INVALID
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn is_invalid_input(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.is::<ConfigError>()
            || c.is::<GridError>()
            || matches!(c.downcast_ref::<DatasetError>(), Some(DatasetError::ManifestMissing(_) | DatasetError::ManifestInvalid { .. }))
    })
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Run { config, exec } => cmd_run(&config, &exec),
        Command::Ablate { grid, exec, dry_run } => cmd_ablate(&grid, &exec, dry_run),
        Command::Report { out, baseline, compare } => cmd_report(&out, &baseline, compare.as_deref()),
        Command::Preset { name } => {
            println!("{}", RunConfig::preset(&name)?.to_json_pretty());
            Ok(0)
        }
        Command::Phantom { out, kind, count, seed } => cmd_phantom(&out, kind, count, seed),
        Command::Curate {
            dataset,
            out,
            split,
            per_class,
            seed,
            rules,
            against,
        } => cmd_curate(&dataset, &out, split, per_class, seed, rules.as_deref(), against.as_deref()),
    }
}

pub fn load_config(spec: &str) -> Result<RunConfig> {
    if let Some(name) = spec.strip_prefix("preset:") {
        return Ok(RunConfig::preset(name)?);
    }
    Ok(RunConfig::load(Path::new(spec))?)
}

/// Applies `--backend` to the config so the config id reflects it.
fn apply_backend(cfg: &mut RunConfig, flag: Option<&str>) -> Result<()> {
    match flag {
        None => {}
        Some("synthetic") => {
            cfg.backend.kind = BackendKind::Synthetic;
            cfg.backend.model_dir = None;
        }
        Some(s) => match s.strip_prefix("onnx:") {
            Some(dir) if !dir.is_empty() => {
                cfg.backend.kind = BackendKind::Onnx;
                cfg.backend.model_dir = Some(dir.to_string());
            }
            _ => bail!(ConfigError::ConfigInvalid {
                key: "backend".into(),
                detail: format!("`{s}` is neither `synthetic` nor `onnx:<dir>`"),
            }),
        },
    }
    Ok(())
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let m = Manifest::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, base))
}

fn options(exec: &Exec) -> RunOptions {
    RunOptions {
        workers: exec.workers,
        keep_going: exec.keep_going,
        profile: exec.profile,
    }
}

fn cmd_run(config: &str, exec: &Exec) -> Result<i32> {
    let mut cfg = load_config(config)?;
    apply_backend(&mut cfg, exec.backend.as_deref())?;
    let (manifest, base) = load_manifest(&exec.manifest)?;
    let backend = build_backend(&cfg, None)?;
    let (outcome, timings) = run_manifest(&cfg, backend.as_ref(), &manifest, &base, options(exec))?;
    write_results(&exec.out, &cfg, &outcome, &timings)?;
    print!("{}", std::fs::read_to_string(exec.out.join("metrics.md"))?);
    eprintln!(
        "{}: {} records, {} failures -> {}",
        cfg.config_id(),
        outcome.records.len(),
        outcome.failures.len(),
        exec.out.display()
    );
    Ok(0)
}

fn cmd_ablate(grid_path: &Path, exec: &Exec, dry_run: bool) -> Result<i32> {
    let text = std::fs::read_to_string(grid_path).with_context(|| format!("reading {}", grid_path.display()))?;
    let grid = Grid::parse(&text)?;
    let mut rows = grid.expand()?;
    for r in &mut rows {
        apply_backend(&mut r.config, exec.backend.as_deref())?;
        r.config_id = r.config.config_id();
    }
    let mut per_experiment: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &rows {
        *per_experiment.entry(&r.experiment).or_default() += 1;
    }
    for r in &rows {
        println!("row {} {} {}", r.experiment, r.label, r.config_id);
    }
    for (e, n) in &per_experiment {
        println!("experiment {e} {n}");
    }
    if dry_run {
        return Ok(0);
    }
    let (manifest, base) = load_manifest(&exec.manifest)?;
    std::fs::create_dir_all(&exec.out)?;
    std::fs::write(exec.out.join("ablation.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if !seen.insert(r.config_id.clone()) {
            continue;
        }
        let dir = exec.out.join("configs").join(&r.config_id);
        if load_completed(&dir)?.is_some() {
            println!("skip {}", r.config_id);
            continue;
        }
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        println!("run {}", r.config_id);
        let backend = build_backend(&r.config, None)?;
        let (outcome, timings) = run_manifest(&r.config, backend.as_ref(), &manifest, &base, options(exec))?;
        write_results(&dir, &r.config, &outcome, &timings)?;
    }
    let table = ablation_table(&exec.out, &rows)?;
    std::fs::write(exec.out.join("ablation.md"), &table)?;
    print!("{table}");
    Ok(0)
}

fn stat(s: Option<Stat>) -> String {
    s.map(|s| format!("{:.4} ± {:.4}", s.mean, s.std)).unwrap_or_else(|| "n/a".into())
}

fn ablation_table(out: &Path, rows: &[grid::Row]) -> Result<String> {
    let mut s = String::new();
    let mut current = "";
    for r in rows {
        if r.experiment != current {
            current = &r.experiment;
            writeln!(s, "\n### {current}\n\n| Variant | config_id | IoU | Dice | HD (mm) |\n|---|---|---|---|---|").unwrap();
        }
        let Some(done) = load_completed(&out.join("configs").join(&r.config_id))? else {
            bail!("config {} did not complete", r.config_id);
        };
        let agg = volprop::metrics::aggregate(&done.records).ok();
        writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            r.label,
            r.config_id,
            stat(agg.as_ref().map(|a| a.overall.iou)),
            stat(agg.as_ref().map(|a| a.overall.dice)),
            stat(agg.as_ref().and_then(|a| a.overall.hausdorff_mm)),
        )
        .unwrap();
    }
    Ok(s)
}

fn cmd_report(out: &Path, baseline: &str, compare: Option<&str>) -> Result<i32> {
    let completed = report::collect(out)?;
    let r = report::build(&completed, baseline, compare)?;
    let text = report::render(&r);
    std::fs::write(out.join("report.md"), &text)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&r)? + "\n")?;
    print!("{text}");
    Ok(0)
}

fn cmd_phantom(out: &Path, kind: PhantomKind, count: usize, seed: u64) -> Result<i32> {
    let m = match kind {
        PhantomKind::Ellipsoids => write_phantom_dataset(out, count, seed)?,
        PhantomKind::Sphere => write_phantoms(out, &[sphere(64, 10.0)], seed)?,
        PhantomKind::Tube => write_phantoms(out, &[drifting_tube_with_distractor()], seed)?,
    };
    println!("{} phantoms -> {}", m.entries.len(), out.join("manifest.jsonl").display());
    Ok(0)
}

fn cmd_curate(
    dataset: &Path,
    out: &Path,
    split: Split,
    per_class: Option<usize>,
    seed: Option<u64>,
    rules: Option<&Path>,
    against: Option<&Path>,
) -> Result<i32> {
    let table = match rules {
        Some(p) => RuleTable::load(p)?,
        None => RuleTable::builtin(),
    };
    let Some(per_class) = per_class.or(split.per_class()) else {
        bail!("--per-class is required for the custom split");
    };
    let seed = seed.unwrap_or(split.default_seed());
    std::fs::create_dir_all(out)?;
    let (candidates, scans) = scan_dataset(dataset, &table, out)?;
    let mut eligibility = csv_writer(&out.join("eligibility.csv"))?;
    eligibility.write_record(["case_id", "target_class", "nonempty_slices", "extent", "eligible"])?;
    for s in &scans {
        eligibility.write_record([
            s.case_id.clone(),
            s.target_class.clone(),
            s.coverage.nonempty_slices.to_string(),
            s.coverage.extent.to_string(),
            s.eligible.to_string(),
        ])?;
    }
    eligibility.flush()?;
    let manifest = build_split(&candidates, per_class, seed, split, &table.hash())?;
    let path = out.join(format!("{split}.jsonl"));
    manifest.save(&path)?;
    for (class, n) in manifest.per_class_counts() {
        println!("{class} {n}");
    }
    println!("total {} -> {}", manifest.entries.len(), path.display());
    if let Some(other) = against {
        let shared = overlap(&Manifest::load(other)?, &manifest);
        println!("overlap {} with {}", shared.len(), other.display());
    }
    Ok(0)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}
