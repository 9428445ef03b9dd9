//! Deterministic stand-in backend for end-to-end tests without model weights.
//!
//! The "embedding" is the slice intensity itself. A prompted frame echoes its
//! prompt. An unprompted frame grows a region from the masks stored on the
//! lowest attended temporal slot: the seed is dilated, then restricted to
//! pixels whose intensity is close to the seed's mean intensity.

use std::hint::black_box;

use serde::{Deserialize, Serialize};

use super::backend::{BackendError, SegmentOutput, SegmentationBackend};
use crate::membank::{AttendedEntry, FeatureMap};
use crate::preproc::ThreeChannelImage;
use crate::profiler::{Stage, StageClock};
use crate::volume::Grid2;

/// Logit magnitude emitted for foreground and background.
pub const LOGIT: f32 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    /// Maximum distance from the seed mean, in normalized intensity.
    pub tolerance: f32,
    /// Euclidean dilation radius in pixels.
    pub dilation: usize,
    pub slots: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            tolerance: 0.1,
            dilation: 2,
            slots: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    params: SyntheticParams,
    disk: Vec<(isize, isize)>,
}

impl SyntheticBackend {
    pub fn new(params: SyntheticParams) -> Self {
        let r = params.dilation as isize;
        let disk = (-r..=r)
            .flat_map(|dv| (-r..=r).map(move |du| (du, dv)))
            .filter(|(du, dv)| du * du + dv * dv <= r * r)
            .collect();
        Self { params, disk }
    }

    pub fn params(&self) -> SyntheticParams {
        self.params
    }

    fn dilate(&self, mask: &[bool], w: usize, h: usize) -> Vec<bool> {
        let mut out = vec![false; mask.len()];
        for v in 0..h {
            for u in 0..w {
                if !mask[u + w * v] {
                    continue;
                }
                for &(du, dv) in &self.disk {
                    let (uu, vv) = (u as isize + du, v as isize + dv);
                    if uu >= 0 && vv >= 0 && (uu as usize) < w && (vv as usize) < h {
                        out[uu as usize + w * vv as usize] = true;
                    }
                }
            }
        }
        out
    }

    /// Region growing from the masks on the lowest attended slot.
    fn grow(&self, embedding: &FeatureMap, context: &[AttendedEntry], w: usize, h: usize) -> (Vec<bool>, f32) {
        let Some(top) = context.iter().map(|a| a.slot).min() else {
            return (vec![false; w * h], 0.0);
        };
        let mut seed = vec![false; w * h];
        let (mut sum, mut count) = (0.0f64, 0usize);
        for a in context.iter().filter(|a| a.slot == top) {
            let e = &a.entry;
            for (i, (&m, &x)) in e.mask_features.data.iter().zip(e.embedding.data.iter()).enumerate() {
                if m > 0.0 {
                    seed[i] = true;
                    sum += x as f64;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return (seed, 0.0);
        }
        let mean = (sum / count as f64) as f32;
        let grown = self.dilate(&seed, w, h);
        let kept: Vec<bool> = grown
            .iter()
            .zip(embedding.data.iter())
            .map(|(&g, &x)| g && (x - mean).abs() <= self.params.tolerance)
            .collect();
        let seed_n = seed.iter().filter(|&&s| s).count();
        let overlap = kept.iter().zip(&seed).filter(|(&k, &s)| k && s).count();
        (kept, overlap as f32 / seed_n as f32)
    }
}

impl Default for SyntheticBackend {
    fn default() -> Self {
        Self::new(SyntheticParams::default())
    }
}

fn logits_from(mask: &[bool], w: usize, h: usize) -> Grid2 {
    Grid2::new(w, h, mask.iter().map(|&m| if m { LOGIT } else { -LOGIT }).collect())
}

fn mask_features(mask: &[bool], w: usize, h: usize) -> FeatureMap {
    FeatureMap::new(vec![h, w], mask.iter().map(|&m| m as u8 as f32).collect(), (w, h))
}

/// Dot-product affinity of the frame against each attended entry. The result
/// is discarded; the loop exists so attention cost scales with context size.
fn attend(embedding: &FeatureMap, context: &[AttendedEntry]) {
    for a in context {
        let e = &a.entry;
        let mut acc = 0.0f32;
        for ((q, k), m) in embedding.data.iter().zip(e.embedding.data.iter()).zip(e.mask_features.data.iter()) {
            acc += q * k * (1.0 + m);
        }
        black_box(acc);
    }
}

impl SegmentationBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn slot_count(&self) -> usize {
        self.params.slots
    }

    fn input_resolution(&self) -> Option<usize> {
        None
    }

    fn encode_slice(&self, image: &ThreeChannelImage) -> Result<FeatureMap, BackendError> {
        let n = image.width * image.height;
        Ok(FeatureMap::new(
            vec![image.height, image.width],
            image.data[..n].to_vec(),
            (image.width, image.height),
        ))
    }

    fn segment(
        &self,
        embedding: &FeatureMap,
        context: &[AttendedEntry],
        prompt: Option<&Grid2>,
        clock: &mut StageClock,
    ) -> Result<SegmentOutput, BackendError> {
        let (w, h) = embedding.frame;
        if let Some(p) = prompt {
            if (p.width, p.height) != (w, h) {
                return Err(BackendError::Inference(format!(
                    "prompt is {}x{}, frame is {w}x{h}",
                    p.width, p.height
                )));
            }
            let mask: Vec<bool> = p.data.iter().map(|&v| v > 0.0).collect();
            let logits = clock.measure(Stage::Decode, || logits_from(&mask, w, h));
            let mask_features = clock.measure(Stage::MemoryEncode, || mask_features(&mask, w, h));
            return Ok(SegmentOutput {
                logits,
                confidence: 1.0,
                mask_features,
            });
        }

        clock.measure(Stage::MemoryAttention, || attend(embedding, context));

        let (mask, confidence, logits) = clock.measure(Stage::Decode, || {
            let (mask, confidence) = self.grow(embedding, context, w, h);
            let logits = logits_from(&mask, w, h);
            (mask, confidence, logits)
        });
        let mask_features = clock.measure(Stage::MemoryEncode, || mask_features(&mask, w, h));
        Ok(SegmentOutput {
            logits,
            confidence,
            mask_features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::membank::MemoryEntry;
    use crate::preproc::to_three_channel;

    fn frame(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Grid2 {
        Grid2::new(w, h, (0..h).flat_map(|v| (0..w).map(move |u| (u, v))).map(|(u, v)| f(u, v)).collect())
    }

    fn stored(b: &SyntheticBackend, image: &Grid2, mask: &Grid2, slot: usize) -> AttendedEntry {
        let embedding = b.encode_slice(&to_three_channel(image)).unwrap();
        let out = b.segment(&embedding, &[], Some(mask), &mut StageClock::default()).unwrap();
        AttendedEntry {
            entry: MemoryEntry {
                slice_index: 0,
                embedding,
                mask_features: out.mask_features,
                conditioned: slot == 0,
                confidence: out.confidence,
            },
            slot,
        }
    }

    #[test]
    fn prompt_is_echoed() {
        let b = SyntheticBackend::default();
        let img = frame(5, 4, |_, _| 0.5);
        let prompt = frame(5, 4, |u, v| (u == 2 && v == 1) as u8 as f32);
        let e = b.encode_slice(&to_three_channel(&img)).unwrap();
        let out = b.segment(&e, &[], Some(&prompt), &mut StageClock::default()).unwrap();
        for (l, p) in out.logits.data.iter().zip(&prompt.data) {
            assert_eq!(*l > 0.0, *p > 0.0);
            assert_eq!(l.abs(), LOGIT);
        }
        assert_eq!(out.confidence, 1.0);
    }

    #[test]
    fn empty_context_is_negative() {
        let b = SyntheticBackend::default();
        let e = b.encode_slice(&to_three_channel(&frame(4, 4, |_, _| 0.9))).unwrap();
        let out = b.segment(&e, &[], None, &mut StageClock::default()).unwrap();
        assert!(out.logits.data.iter().all(|&l| l == -LOGIT));
        assert_eq!(out.confidence, 0.0);
    }

    #[test]
    fn only_seed_blob_is_segmented() {
        let b = SyntheticBackend::default();
        // two blobs of equal intensity 10 px apart, more than twice the dilation
        let blob = |u: usize, v: usize| (u.abs_diff(5) <= 2 && v.abs_diff(8) <= 2) || (u.abs_diff(20) <= 2 && v.abs_diff(8) <= 2);
        let img = frame(26, 16, |u, v| if blob(u, v) { 0.8 } else { 0.0 });
        let seed_mask = frame(26, 16, |u, v| (u.abs_diff(5) <= 1 && v.abs_diff(8) <= 1) as u8 as f32);
        let ctx = [stored(&b, &img, &seed_mask, 0)];
        let e = b.encode_slice(&to_three_channel(&img)).unwrap();
        let out = b.segment(&e, &ctx, None, &mut StageClock::default()).unwrap();
        for v in 0..16usize {
            for u in 0..26usize {
                let expect = u.abs_diff(5) <= 2 && v.abs_diff(8) <= 2;
                assert_eq!(out.logits.get(u, v) > 0.0, expect, "({u},{v})");
            }
        }
        assert_eq!(out.confidence, 1.0);
    }

    #[test]
    fn lowest_slot_seeds() {
        let b = SyntheticBackend::default();
        let img = frame(20, 8, |u, _| if !(4..=15).contains(&u) { 0.8 } else { 0.0 });
        let left = frame(20, 8, |u, _| (u < 3) as u8 as f32);
        let right = frame(20, 8, |u, _| (u > 16) as u8 as f32);
        let ctx = [stored(&b, &img, &right, 3), stored(&b, &img, &left, 1)];
        let e = b.encode_slice(&to_three_channel(&img)).unwrap();
        let out = b.segment(&e, &ctx, None, &mut StageClock::default()).unwrap();
        assert!(out.logits.get(0, 0) > 0.0);
        assert!(out.logits.get(19, 0) < 0.0);
    }

    #[test]
    fn confidence_measures_seed_retention() {
        let b = SyntheticBackend::default();
        let prev = frame(10, 1, |u, _| if u < 4 { 0.8 } else { 0.0 });
        let seed = frame(10, 1, |u, _| (u < 4) as u8 as f32);
        let ctx = [stored(&b, &prev, &seed, 0)];
        // half of the seed region changes intensity
        let cur = frame(10, 1, |u, _| if u < 2 { 0.8 } else { 0.0 });
        let e = b.encode_slice(&to_three_channel(&cur)).unwrap();
        let out = b.segment(&e, &ctx, None, &mut StageClock::default()).unwrap();
        assert_eq!(out.confidence, 0.5);
        assert_eq!(out.logits.foreground_count(), 2);
    }

    #[test]
    fn stages_are_timed() {
        let b = SyntheticBackend::default();
        let img = frame(4, 4, |_, _| 0.5);
        let e = b.encode_slice(&to_three_channel(&img)).unwrap();
        let mut clock = StageClock::new(true);
        b.segment(&e, &[], None, &mut clock).unwrap();
        let stages: Vec<Stage> = clock.spans().iter().map(|s| s.0).collect();
        assert_eq!(stages, vec![Stage::MemoryAttention, Stage::Decode, Stage::MemoryEncode]);
    }
}
