//! End-to-end segmentation of one structure: crop, window, prompt, propagate,
//! score.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::config::{BackendKind, RunConfig};
use crate::dataset::{build_split, DatasetError, Manifest, ManifestEntry, Split};
use crate::engine::{
    BackendError, CachedBackend, Engine, EngineError, OnnxBackend, Propagation, SegmentationBackend,
    SyntheticBackend, CACHE_ENV,
};
use crate::membank::Direction;
use crate::metrics::{evaluate, MetricsError, MetricsRecord};
use crate::nifti::{self, Datatype, NiftiError};
use crate::phantom::{ellipsoid_suite, Phantom};
use crate::profiler::{Profiler, StageTiming};
use crate::prompts::{allocate_three_axis, simulate_prompts, PromptError};
use crate::volume::{crop_to_roi, Roi, Volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Preproc(#[from] crate::preproc::PreprocError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Backend named by the config, or by `model_dir` when given. Wrapped in an
/// embedding cache when `VOLPROP_CACHE` is set.
pub fn build_backend(cfg: &RunConfig, model_dir: Option<&Path>) -> Result<Box<dyn SegmentationBackend>, BackendError> {
    let cache = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty());
    let dir = model_dir
        .map(Path::to_path_buf)
        .or_else(|| (cfg.backend.kind == BackendKind::Onnx).then(|| cfg.backend.model_dir.clone().unwrap_or_default().into()));
    match (dir, cache) {
        (Some(d), Some(c)) => Ok(Box::new(CachedBackend::new(OnnxBackend::load(d)?, c)?)),
        (Some(d), None) => Ok(Box::new(OnnxBackend::load(d)?)),
        (None, Some(c)) => Ok(Box::new(CachedBackend::new(
            SyntheticBackend::new(cfg.backend.synthetic_params()),
            c,
        )?)),
        (None, None) => Ok(Box::new(SyntheticBackend::new(cfg.backend.synthetic_params()))),
    }
}

/// Prediction and score for one structure.
#[derive(Debug, Clone)]
pub struct StructureResult {
    pub record: MetricsRecord,
    /// Binary prediction on the (possibly cropped) evaluation grid.
    pub prediction: Volume,
    pub timings: Vec<StageTiming>,
}

/// Runs `cfg` on one CT volume and ground-truth mask.
pub fn segment_structure(
    cfg: &RunConfig,
    backend: &dyn SegmentationBackend,
    ct: &Volume,
    gt: &Volume,
    case_id: &str,
    structure: &str,
    profile: bool,
) -> Result<StructureResult, PipelineError> {
    let config_id = cfg.config_id();
    let (ct, gt) = if cfg.crop.enabled {
        let roi = Roi::bounding_box(gt).ok_or(PipelineError::EmptyGroundTruth)?;
        (crop_to_roi(ct, roi, cfg.crop.margin)?.0, crop_to_roi(gt, roi, cfg.crop.margin)?.0)
    } else {
        (ct.clone(), gt.clone())
    };
    let gt = gt.map(VolumeKind::BinaryMask, |v| if v > 0.0 { 1.0 } else { 0.0 })?;
    let engine = Engine::new(backend, cfg.preprocessor(), cfg.memory);
    let normalized = engine.preprocessor.prepare_volume(&ct)?;
    let mut profiler = if profile {
        Profiler::new(format!("{case_id}/{structure}"), config_id.clone())
    } else {
        Profiler::disabled()
    };
    let prediction = match cfg.propagation {
        Propagation::Forward => {
            let prompts = simulate_prompts(&gt, cfg.axis, cfg.prompt)?;
            engine
                .propagate_axis(&normalized, &prompts, Direction::Forward, &mut profiler)?
                .to_mask(&normalized)?
        }
        Propagation::ForwardBackward => {
            let prompts = simulate_prompts(&gt, cfg.axis, cfg.prompt)?;
            engine.run_forward_backward(&normalized, &prompts, &mut profiler)?.to_mask(&normalized)?
        }
        Propagation::ThreeAxis => {
            let prompts = allocate_three_axis(&gt, cfg.prompt)?;
            engine.run_three_axis(&normalized, &prompts, &mut profiler)?.1.mask
        }
    };
    let mut record = evaluate(&prediction, &gt, case_id, structure, &config_id)?;
    let timings = profiler.record();
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for t in &timings {
        *totals.entry(t.stage.to_string()).or_insert(0.0) += t.duration_ms;
    }
    record.timings = totals;
    Ok(StructureResult {
        record,
        prediction,
        timings,
    })
}

/// Loads a manifest entry's volumes (paths relative to `base`) and runs it.
pub fn run_entry(
    cfg: &RunConfig,
    backend: &dyn SegmentationBackend,
    entry: &ManifestEntry,
    base: &Path,
    profile: bool,
) -> Result<StructureResult, PipelineError> {
    let ct = nifti::load_volume(base.join(&entry.volume), VolumeKind::Intensity)?;
    let gt = nifti::load_volume(base.join(&entry.mask), VolumeKind::BinaryMask)?;
    if ct.dims() != gt.dims() {
        return Err(VolumeError::DimensionMismatch {
            expected: ct.dims(),
            actual: gt.dims(),
        }
        .into());
    }
    segment_structure(cfg, backend, &ct, &gt, &entry.case_id, &entry.target_class, profile)
}

/// Writes `count` seeded ellipsoid phantoms under `dir` as NIfTI pairs and a
/// manifest (`manifest.jsonl`) with one entry per phantom.
pub fn write_phantom_dataset(dir: &Path, count: usize, seed: u64) -> Result<Manifest, PipelineError> {
    let phantoms = ellipsoid_suite(count, seed);
    write_phantoms(dir, &phantoms, seed)
}

pub fn write_phantoms(dir: &Path, phantoms: &[Phantom], seed: u64) -> Result<Manifest, PipelineError> {
    std::fs::create_dir_all(dir).map_err(DatasetError::Io)?;
    let mut entries = Vec::new();
    for p in phantoms {
        let volume = format!("{}_ct.nii.gz", p.name);
        let mask = format!("{}_gt.nii.gz", p.name);
        nifti::save_volume(dir.join(&volume), &p.ct, Datatype::Int16)?;
        nifti::save_volume(dir.join(&mask), &p.gt, Datatype::UInt8)?;
        entries.push(ManifestEntry {
            target_class: "phantom".into(),
            case_id: p.name.clone(),
            volume,
            mask,
        });
    }
    let manifest = build_split(&entries, entries.len(), seed, Split::Custom, "phantom")?;
    manifest.save(&dir.join("manifest.jsonl")).map_err(DatasetError::Io)?;
    Ok(manifest)
}
