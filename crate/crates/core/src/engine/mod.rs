//! Slice propagation along one or three axes.

mod backend;
mod cache;
pub mod onnx;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{BackendError, SegmentOutput, SegmentationBackend};
pub use cache::{CachedBackend, CACHE_ENV};
pub use onnx::OnnxBackend;
pub use synthetic::{SyntheticBackend, SyntheticParams, LOGIT};

use crate::membank::{Direction, FeatureMap, MemoryBank, MemoryEntry, MemoryError, MemoryPolicy};
use crate::preproc::{PreprocError, Preprocessor};
use crate::profiler::{Profiler, Stage};
use crate::prompts::PromptSet;
use crate::volume::{reorient_to_reference, reslice, Axis, LogitVolume, Volume, VolumeError, VolumeKind};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("prompt set is empty")]
    EmptyPrompts,
    #[error("no prompts for the {0} axis")]
    MissingAxis(Axis),
    #[error("backend failure: {0}")]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// How a volume is traversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Propagation {
    Forward,
    ForwardBackward,
    ThreeAxis,
}

impl fmt::Display for Propagation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Propagation::Forward => "forward",
            Propagation::ForwardBackward => "forward-backward",
            Propagation::ThreeAxis => "three-axis",
        })
    }
}

impl FromStr for Propagation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "forward" => Ok(Propagation::Forward),
            "forward-backward" => Ok(Propagation::ForwardBackward),
            "three-axis" => Ok(Propagation::ThreeAxis),
            other => Err(format!("unknown propagation `{other}`")),
        }
    }
}

/// Fused three-axis output on the reference grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    /// `sigmoid(mean logit)` per voxel, always inside `(0, 1)`.
    pub probability: Vec<f64>,
    /// Voxels whose mean logit is strictly positive.
    pub mask: Volume,
}

/// Backend plus the per-run settings every pass shares.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    pub backend: &'a dyn SegmentationBackend,
    pub preprocessor: Preprocessor,
    pub policy: MemoryPolicy,
}

impl<'a> Engine<'a> {
    pub fn new(backend: &'a dyn SegmentationBackend, preprocessor: Preprocessor, policy: MemoryPolicy) -> Self {
        Self {
            backend,
            preprocessor,
            policy,
        }
    }

    /// One pass over `volume` (already intensity-normalized) along the prompt
    /// axis, in sequence frame.
    ///
    /// A forward pass covers the first prompt up to the end of the structure
    /// extent, a backward pass the last prompt down to its start. Every
    /// prompted slice enters memory as a conditioned entry before traversal.
    pub fn propagate_axis(
        &self,
        volume: &Volume,
        prompts: &PromptSet,
        direction: Direction,
        profiler: &mut Profiler,
    ) -> Result<LogitVolume, EngineError> {
        if prompts.is_empty() {
            return Err(EngineError::EmptyPrompts);
        }
        let seq = reslice(volume, prompts.axis);
        let indices = prompts.indices();
        let (first, last) = prompts.extent;
        let order: Vec<usize> = match direction {
            Direction::Forward => (indices[0]..=last).collect(),
            Direction::Backward => (first..=indices[indices.len() - 1]).rev().collect(),
        };

        let start = Instant::now();
        let mut embeddings: BTreeMap<usize, FeatureMap> = BTreeMap::new();
        for &t in &order {
            let image = self.preprocessor.prepare_slice(&seq.slice(t))?;
            let e = profiler.measure(Stage::Encode, Some(t), || self.backend.encode_slice(&image))?;
            embeddings.insert(t, e);
        }
        profiler.record_span(Stage::StateInit, None, start.elapsed());

        let mut bank = MemoryBank::new(self.policy, direction, self.backend.slot_count(), seq.len());
        let mut out = LogitVolume::for_sequence(&seq);
        for p in &prompts.entries {
            let mut clock = profiler.clock();
            let start = Instant::now();
            let embedding = &embeddings[&p.slice_index];
            let res = self.backend.segment(embedding, &[], Some(&p.mask), &mut clock)?;
            profiler.absorb(clock, p.slice_index, start.elapsed());
            out.set_slice(p.slice_index, &res.logits);
            bank.admit_conditioned(MemoryEntry {
                slice_index: p.slice_index,
                embedding: embedding.clone(),
                mask_features: res.mask_features,
                conditioned: true,
                confidence: res.confidence,
            });
        }

        for &t in &order {
            if prompts.get(t).is_some() {
                continue;
            }
            let context = bank.context(t)?;
            let mut clock = profiler.clock();
            let start = Instant::now();
            let res = self.backend.segment(&embeddings[&t], &context, None, &mut clock)?;
            let tracking: Duration = start.elapsed();
            profiler.absorb(clock, t, tracking);
            out.set_slice(t, &res.logits);
            bank.admit(MemoryEntry {
                slice_index: t,
                embedding: embeddings[&t].clone(),
                mask_features: res.mask_features,
                conditioned: false,
                confidence: res.confidence,
            });
        }
        Ok(out)
    }

    /// Independent forward and backward passes, averaged where both produced
    /// output.
    pub fn run_forward_backward(
        &self,
        volume: &Volume,
        prompts: &PromptSet,
        profiler: &mut Profiler,
    ) -> Result<LogitVolume, EngineError> {
        let fwd = self.propagate_axis(volume, prompts, Direction::Forward, profiler)?;
        let bwd = self.propagate_axis(volume, prompts, Direction::Backward, profiler)?;
        Ok(fwd.merge_with(&bwd, |a, b| (a + b) / 2.0)?)
    }

    /// Forward passes along each axis with independent memory, reoriented to
    /// the reference grid and fused. Axes run on separate threads.
    pub fn run_three_axis(
        &self,
        volume: &Volume,
        prompts: &BTreeMap<Axis, PromptSet>,
        profiler: &mut Profiler,
    ) -> Result<(BTreeMap<Axis, LogitVolume>, FusedPrediction), EngineError> {
        let sets: Vec<&PromptSet> = [Axis::Axial, Axis::Coronal, Axis::Sagittal]
            .iter()
            .map(|a| prompts.get(a).ok_or(EngineError::MissingAxis(*a)))
            .collect::<Result<_, _>>()?;
        let results: Vec<Result<(LogitVolume, Profiler), EngineError>> = std::thread::scope(|s| {
            let handles: Vec<_> = sets
                .iter()
                .map(|set| {
                    let mut local = profiler.fork();
                    s.spawn(move || {
                        let l = self.propagate_axis(volume, set, Direction::Forward, &mut local)?;
                        Ok((reorient_to_reference(&l, volume)?, local))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("axis pass panicked")).collect()
        });
        let mut per_axis = BTreeMap::new();
        for (set, r) in sets.iter().zip(results) {
            let (l, local) = r?;
            profiler.merge(local);
            per_axis.insert(set.axis, l);
        }
        let fused = fuse_three_axis(
            &per_axis[&Axis::Axial],
            &per_axis[&Axis::Coronal],
            &per_axis[&Axis::Sagittal],
            volume,
        )?;
        Ok((per_axis, fused))
    }
}

/// Mean logits beyond this magnitude would round the sigmoid to 0 or 1.
const FUSION_CLAMP: f64 = 36.0;

/// `sigmoid((l_a + l_c + l_s) / 3)` per voxel on `reference`'s grid. Voxels an
/// axis did not reach count as logit 0. The three values are summed in sorted
/// order so the result does not depend on argument order.
pub fn fuse_three_axis(
    l_a: &LogitVolume,
    l_c: &LogitVolume,
    l_s: &LogitVolume,
    reference: &Volume,
) -> Result<FusedPrediction, VolumeError> {
    let a = reorient_to_reference(l_a, reference)?;
    let c = reorient_to_reference(l_c, reference)?;
    let s = reorient_to_reference(l_s, reference)?;
    let n = reference.len();
    let mut probability = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = [a.data()[i] as f64, c.data()[i] as f64, s.data()[i] as f64];
        v.sort_by(f64::total_cmp);
        let mean = (v[0] + v[1] + v[2]) / 3.0;
        probability.push(sigmoid(mean.clamp(-FUSION_CLAMP, FUSION_CLAMP)));
        mask.push(if mean > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(FusedPrediction {
        probability,
        mask: reference.with_data(VolumeKind::BinaryMask, mask)?,
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
