//! Backend executing three exported graphs: image encoder, memory attention
//! plus mask decoder, and memory encoder.
//!
//! Tensor names, dtypes and ranks are fixed by [`SIGNATURE_MANIFEST`]. The
//! model directory is always validated; execution needs the `onnx` feature.

mod proto;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

pub use proto::{parse_model, Dim, ElemType, ModelInfo, TensorInfo};

use super::backend::{BackendError, SegmentOutput, SegmentationBackend};
use crate::membank::{AttendedEntry, FeatureMap};
use crate::preproc::ThreeChannelImage;
use crate::profiler::StageClock;
use crate::volume::Grid2;

pub const SIGNATURE_MANIFEST: &str = include_str!("../../../data/onnx_signature.json");

/// Slot count assumed when the graphs carry no `slot_count` metadata.
pub const DEFAULT_SLOT_COUNT: usize = 7;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSignature {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<String>,
    #[serde(default)]
    pub optional: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSignature {
    pub role: String,
    pub file: String,
    pub inputs: Vec<TensorSignature>,
    pub outputs: Vec<TensorSignature>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetadataKeys {
    pub slot_count: String,
    pub input_resolution: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureManifest {
    pub schema: u32,
    pub metadata: MetadataKeys,
    pub graphs: Vec<GraphSignature>,
}

impl SignatureManifest {
    pub fn builtin() -> Self {
        serde_json::from_str(SIGNATURE_MANIFEST).expect("bundled signature manifest is valid")
    }

    pub fn graph(&self, role: &str) -> &GraphSignature {
        self.graphs
            .iter()
            .find(|g| g.role == role)
            .unwrap_or_else(|| panic!("no `{role}` graph in signature manifest"))
    }
}

/// A model directory whose graphs match the signature manifest.
#[derive(Debug, Clone)]
pub struct ValidatedModel {
    pub dir: PathBuf,
    pub slot_count: usize,
    pub input_resolution: usize,
    /// Role to graph file and parsed signature.
    pub graphs: BTreeMap<String, (PathBuf, ModelInfo)>,
}

fn mismatch(tensor: impl Into<String>, detail: impl Into<String>) -> BackendError {
    BackendError::SignatureMismatch {
        tensor: tensor.into(),
        detail: detail.into(),
    }
}

fn check_tensors(
    role: &str,
    kind: &str,
    expected: &[TensorSignature],
    found: &[TensorInfo],
) -> Result<(), BackendError> {
    for e in expected {
        let tensor = format!("{role}/{}", e.name);
        let Some(f) = found.iter().find(|f| f.name == e.name) else {
            if e.optional {
                continue;
            }
            return Err(mismatch(tensor, format!("missing {kind}")));
        };
        if let Some(t) = f.elem_type {
            if t.name() != e.dtype {
                return Err(mismatch(tensor, format!("expected {}, found {}", e.dtype, t.name())));
            }
        }
        if let Some(dims) = &f.dims {
            if dims.len() != e.shape.len() {
                return Err(mismatch(
                    tensor,
                    format!("expected rank {}, found rank {}", e.shape.len(), dims.len()),
                ));
            }
        }
    }
    Ok(())
}

/// Checks that `dir` holds the three graphs with the expected tensors and
/// reads the slot count and encoder resolution.
pub fn validate_model_dir(dir: &Path) -> Result<ValidatedModel, BackendError> {
    if !dir.is_dir() {
        return Err(BackendError::MissingGraph(format!("model directory {} not found", dir.display())));
    }
    let manifest = SignatureManifest::builtin();
    let mut graphs = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for g in &manifest.graphs {
        let path = dir.join(&g.file);
        let bytes = std::fs::read(&path)
            .map_err(|e| BackendError::MissingGraph(format!("{} ({}): {e}", g.role, path.display())))?;
        let info = parse_model(&bytes).map_err(|e| mismatch(g.role.clone(), format!("unreadable model: {e}")))?;
        if !info.has_graph {
            return Err(BackendError::MissingGraph(format!("{} has no graph", path.display())));
        }
        check_tensors(&g.role, "input", &g.inputs, &info.inputs)?;
        check_tensors(&g.role, "output", &g.outputs, &info.outputs)?;
        for (k, v) in &info.metadata {
            metadata.entry(k.clone()).or_insert_with(|| v.clone());
        }
        graphs.insert(g.role.clone(), (path, info));
    }

    let number = |key: &str| -> Result<Option<usize>, BackendError> {
        metadata
            .get(key)
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| mismatch(format!("metadata/{key}"), format!("not a positive integer: `{v}`")))
            })
            .transpose()
    };
    let slot_count = number(&manifest.metadata.slot_count)?.unwrap_or(DEFAULT_SLOT_COUNT);
    if slot_count < 2 {
        return Err(mismatch("metadata/slot_count", "at least two slots required"));
    }
    let encoder = manifest.graph("image_encoder");
    let image = &encoder.inputs[0].name;
    let static_res = graphs[&encoder.role]
        .1
        .inputs
        .iter()
        .find(|t| &t.name == image)
        .and_then(|t| match t.dims.as_deref() {
            Some([.., Dim::Value(r)]) if *r > 0 => Some(*r as usize),
            _ => None,
        });
    let input_resolution = number(&manifest.metadata.input_resolution)?
        .or(static_res)
        .ok_or_else(|| mismatch(format!("image_encoder/{image}"), "input resolution not declared"))?;
    if input_resolution == 0 || input_resolution % 16 != 0 {
        return Err(mismatch(
            "metadata/input_resolution",
            format!("{input_resolution} is not a positive multiple of 16"),
        ));
    }
    Ok(ValidatedModel {
        dir: dir.to_path_buf(),
        slot_count,
        input_resolution,
        graphs,
    })
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(src: &[f32], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f32> {
    if (sw, sh) == (dw, dh) {
        return src.to_vec();
    }
    let coord = |d: usize, sn: usize, dn: usize| -> (usize, usize, f32) {
        let x = ((d as f32 + 0.5) * sn as f32 / dn as f32 - 0.5).clamp(0.0, (sn - 1) as f32);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(sn - 1), x - lo as f32)
    };
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[x0 + sw * y0] * (1.0 - fx) + src[x1 + sw * y0] * fx;
            let bottom = src[x0 + sw * y1] * (1.0 - fx) + src[x1 + sw * y1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Graph-backed segmenter. Prompted frames reproduce their prompt and only
/// run the memory encoder; an unprompted frame with no context is empty.
pub struct OnnxBackend {
    model: ValidatedModel,
    runtime: runtime::Runtime,
}

impl std::fmt::Debug for OnnxBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackend").field("model", &self.model).finish()
    }
}

impl OnnxBackend {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self, BackendError> {
        let model = validate_model_dir(dir.as_ref())?;
        let runtime = runtime::Runtime::load(&model)?;
        Ok(Self { model, runtime })
    }

    pub fn model(&self) -> &ValidatedModel {
        &self.model
    }
}

impl SegmentationBackend for OnnxBackend {
    fn name(&self) -> &str {
        "onnx"
    }

    fn slot_count(&self) -> usize {
        self.model.slot_count
    }

    fn input_resolution(&self) -> Option<usize> {
        Some(self.model.input_resolution)
    }

    fn encode_slice(&self, image: &ThreeChannelImage) -> Result<FeatureMap, BackendError> {
        let r = self.model.input_resolution;
        let n = image.width * image.height;
        let mut data = Vec::with_capacity(3 * r * r);
        for c in 0..3 {
            data.extend(resize_bilinear(&image.data[c * n..(c + 1) * n], image.width, image.height, r, r));
        }
        let (shape, out) = self.runtime.encode(r, data)?;
        Ok(FeatureMap::new(shape, out, (image.width, image.height)))
    }

    fn segment(
        &self,
        embedding: &FeatureMap,
        context: &[AttendedEntry],
        prompt: Option<&Grid2>,
        clock: &mut StageClock,
    ) -> Result<SegmentOutput, BackendError> {
        let r = self.model.input_resolution;
        let (w, h) = embedding.frame;
        let (logits_r, confidence) = match prompt {
            Some(p) => {
                let up = resize_bilinear(&p.data, p.width, p.height, r, r);
                (up.iter().map(|&v| if v > 0.5 { super::LOGIT } else { -super::LOGIT }).collect(), 1.0)
            }
            None if context.is_empty() => (vec![-super::LOGIT; r * r], 0.0),
            None => self.runtime.decode(r, embedding, context, clock)?,
        };
        let mask_features = clock.measure(crate::profiler::Stage::MemoryEncode, || {
            self.runtime.memory_encode(r, embedding, &logits_r)
        })?;
        let logits = match prompt {
            Some(p) => Grid2::new(
                w,
                h,
                p.data.iter().map(|&v| if v > 0.0 { super::LOGIT } else { -super::LOGIT }).collect(),
            ),
            None => Grid2::new(w, h, resize_bilinear(&logits_r, r, r, w, h)),
        };
        Ok(SegmentOutput {
            logits,
            confidence,
            mask_features: FeatureMap::new(mask_features.0, mask_features.1, (w, h)),
        })
    }
}

#[cfg(not(feature = "onnx"))]
mod runtime {
    use super::*;

    pub struct Runtime(std::convert::Infallible);

    impl Runtime {
        pub fn load(_: &ValidatedModel) -> Result<Self, BackendError> {
            Err(BackendError::RuntimeUnavailable(
                "built without the `onnx` feature; rebuild with `--features onnx`".into(),
            ))
        }

        pub fn encode(&self, _: usize, _: Vec<f32>) -> Result<(Vec<usize>, Vec<f32>), BackendError> {
            match self.0 {}
        }

        pub fn decode(
            &self,
            _: usize,
            _: &FeatureMap,
            _: &[AttendedEntry],
            _: &mut StageClock,
        ) -> Result<(Vec<f32>, f32), BackendError> {
            match self.0 {}
        }

        pub fn memory_encode(&self, _: usize, _: &FeatureMap, _: &[f32]) -> Result<(Vec<usize>, Vec<f32>), BackendError> {
            match self.0 {}
        }
    }
}

#[cfg(feature = "onnx")]
mod runtime {
    use super::*;
    use crate::profiler::Stage;
    use tract_onnx::prelude::*;

    type Plan = TypedSimplePlan<TypedModel>;

    fn fail(e: impl std::fmt::Display) -> BackendError {
        BackendError::Inference(e.to_string())
    }

    struct Graph {
        plan: Plan,
        inputs: Vec<String>,
        outputs: Vec<String>,
    }

    impl Graph {
        fn load(path: &Path, info: &ModelInfo) -> Result<Self, BackendError> {
            let plan = tract_onnx::onnx()
                .model_for_path(path)
                .and_then(|m| m.into_optimized())
                .and_then(|m| m.into_runnable())
                .map_err(fail)?;
            Ok(Self {
                plan,
                inputs: info.inputs.iter().map(|t| t.name.clone()).collect(),
                outputs: info.outputs.iter().map(|t| t.name.clone()).collect(),
            })
        }

        fn run(&self, mut feed: BTreeMap<&str, Tensor>) -> Result<BTreeMap<String, (Vec<usize>, Vec<f32>)>, BackendError> {
            let inputs: TVec<TValue> = self
                .inputs
                .iter()
                .map(|n| {
                    feed.remove(n.as_str())
                        .map(|t| t.into_tvalue())
                        .ok_or_else(|| fail(format!("no value for graph input `{n}`")))
                })
                .collect::<Result<_, _>>()?;
            let out = self.plan.run(inputs).map_err(fail)?;
            self.outputs
                .iter()
                .zip(out.iter())
                .map(|(n, v)| {
                    let view = v.to_array_view::<f32>().map_err(fail)?;
                    Ok((n.clone(), (v.shape().to_vec(), view.iter().copied().collect())))
                })
                .collect()
        }
    }

    pub struct Runtime {
        encoder: Graph,
        decoder: Graph,
        memory: Graph,
    }

    fn tensor(shape: &[usize], data: &[f32]) -> Result<Tensor, BackendError> {
        Tensor::from_shape(shape, data).map_err(fail)
    }

    impl Runtime {
        pub fn load(model: &ValidatedModel) -> Result<Self, BackendError> {
            let graph = |role: &str| {
                let (path, info) = &model.graphs[role];
                Graph::load(path, info)
            };
            Ok(Self {
                encoder: graph("image_encoder")?,
                decoder: graph("memory_decoder")?,
                memory: graph("memory_encoder")?,
            })
        }

        pub fn encode(&self, r: usize, image: Vec<f32>) -> Result<(Vec<usize>, Vec<f32>), BackendError> {
            let mut out = self.encoder.run(BTreeMap::from([("image", tensor(&[1, 3, r, r], &image)?)]))?;
            out.remove("image_embedding").ok_or_else(|| fail("encoder produced no image_embedding"))
        }

        pub fn decode(
            &self,
            r: usize,
            embedding: &FeatureMap,
            context: &[AttendedEntry],
            clock: &mut StageClock,
        ) -> Result<(Vec<f32>, f32), BackendError> {
            let feed = clock.measure(Stage::MemoryAttention, || -> Result<_, BackendError> {
                let per = &context[0].entry.mask_features.shape;
                let mut shape = vec![context.len()];
                shape.extend_from_slice(&per[1..]);
                let mut stacked = Vec::with_capacity(shape.iter().product());
                for a in context {
                    stacked.extend_from_slice(&a.entry.mask_features.data);
                }
                let slots: Vec<i64> = context.iter().map(|a| a.slot as i64).collect();
                let mut feed = BTreeMap::from([
                    ("image_embedding", tensor(&embedding.shape, &embedding.data)?),
                    ("memory_features", tensor(&shape, &stacked)?),
                    (
                        "memory_slots",
                        Tensor::from_shape(&[slots.len()], &slots).map_err(fail)?,
                    ),
                ]);
                if self.decoder.inputs.iter().any(|n| n == "prompt_mask") {
                    feed.insert("prompt_mask", tensor(&[1, 1, r, r], &vec![0.0; r * r])?);
                }
                Ok(feed)
            })?;
            let mut out = clock.measure(Stage::Decode, || self.decoder.run(feed))?;
            let logits = out.remove("logits").ok_or_else(|| fail("decoder produced no logits"))?.1;
            let confidence = out
                .remove("confidence")
                .and_then(|c| c.1.first().copied())
                .ok_or_else(|| fail("decoder produced no confidence"))?;
            Ok((logits, confidence.clamp(0.0, 1.0)))
        }

        pub fn memory_encode(
            &self,
            r: usize,
            embedding: &FeatureMap,
            logits: &[f32],
        ) -> Result<(Vec<usize>, Vec<f32>), BackendError> {
            let mut out = self.memory.run(BTreeMap::from([
                ("image_embedding", tensor(&embedding.shape, &embedding.data)?),
                ("logits", tensor(&[1, 1, r, r], logits)?),
            ]))?;
            out.remove("mask_features").ok_or_else(|| fail("memory encoder produced no mask_features"))
        }
    }
}
