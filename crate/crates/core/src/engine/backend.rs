use thiserror::Error;

use crate::membank::{AttendedEntry, FeatureMap};
use crate::preproc::ThreeChannelImage;
use crate::profiler::StageClock;
use crate::volume::Grid2;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("model graph missing: {0}")]
    MissingGraph(String),
    #[error("signature mismatch on tensor `{tensor}`: {detail}")]
    SignatureMismatch { tensor: String, detail: String },
    #[error("graph runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// Result of segmenting one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentOutput {
    /// Finite logits on the frame's pixel grid; foreground is `> 0`.
    pub logits: Grid2,
    /// Predicted mask quality in `[0, 1]`.
    pub confidence: f32,
    /// Memory-encoded features stored with the frame's memory entry.
    pub mask_features: FeatureMap,
}

/// A promptable, memory-conditioned slice segmenter.
///
/// Implementations must be deterministic. One backend may serve several
/// passes concurrently, so all methods take `&self`.
pub trait SegmentationBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Number of temporal-embedding slots `S`.
    fn slot_count(&self) -> usize;

    /// Square encoder resolution, or `None` when the backend works on the
    /// native slice grid.
    fn input_resolution(&self) -> Option<usize>;

    fn encode_slice(&self, image: &ThreeChannelImage) -> Result<FeatureMap, BackendError>;

    /// Segments the frame with embedding `embedding`. A prompted frame gets
    /// `prompt`; otherwise the prediction comes from `context`. Sub-stages are
    /// timed through `clock`.
    fn segment(
        &self,
        embedding: &FeatureMap,
        context: &[AttendedEntry],
        prompt: Option<&Grid2>,
        clock: &mut StageClock,
    ) -> Result<SegmentOutput, BackendError>;
}
