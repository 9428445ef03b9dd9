//! Volumetric data model.
//!
//! A [`Volume`] is stored in the canonical reference frame: axis 0 runs
//! left to right (x), axis 1 posterior to anterior (y), axis 2 inferior to
//! superior (z). Data is x-fastest, matching the NIfTI on-disk order. The
//! [`Orientation`] recorded at load time maps the canonical grid back to the
//! file's voxel layout.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum VolumeError {
    #[error("volume dimensions must all be >= 1, got {0:?}")]
    EmptyDims([usize; 3]),
    #[error("voxel spacing must be positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("data length {actual} does not match dims {dims:?}")]
    DataLength { dims: [usize; 3], actual: usize },
    #[error("binary mask contains a value other than 0 or 1: {0}")]
    NotBinary(f32),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },
    #[error("region of interest is empty or outside the volume")]
    EmptyRoi,
    #[error("slice count {actual} does not match expected {expected}")]
    SliceCount { expected: usize, actual: usize },
}

/// Anatomical propagation axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Slices stacked along x.
    Sagittal,
    /// Slices stacked along y.
    Coronal,
    /// Slices stacked along z.
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    /// Index of the volume dimension this axis walks along.
    pub const fn index(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }

    /// The two in-plane dimensions, ascending. Slice pixel `(u, v)` sits at
    /// these volume coordinates.
    pub const fn in_plane(self) -> (usize, usize) {
        match self {
            Axis::Sagittal => (1, 2),
            Axis::Coronal => (0, 2),
            Axis::Axial => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    /// Raw CT intensities in Hounsfield units.
    Intensity,
    /// Intensities mapped to `[0, 1]`.
    Normalized,
    Logit,
    BinaryMask,
}

/// Mapping between the canonical grid and the file's voxel layout.
///
/// Canonical axis `i` is file axis `perm[i]`, reversed when `flip[i]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Derives the orientation from the rotation/scale part of a voxel-to-world
    /// affine (rows are world axes, columns voxel axes). Each canonical world
    /// axis is claimed by the voxel axis with the largest absolute component,
    /// strongest first.
    pub fn from_affine(affine: &[[f64; 4]; 3]) -> Self {
        let mut candidates = Vec::with_capacity(9);
        for world in 0..3 {
            for vox in 0..3 {
                candidates.push((affine[world][vox].abs(), world, vox));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut perm = [usize::MAX; 3];
        let mut flip = [false; 3];
        let mut used = [false; 3];
        for (_, world, vox) in candidates {
            if perm[world] != usize::MAX || used[vox] {
                continue;
            }
            perm[world] = vox;
            flip[world] = affine[world][vox] < 0.0;
            used[vox] = true;
        }
        Orientation { perm, flip }
    }

    /// Canonical dims from file dims.
    pub fn canonical_dims(&self, file_dims: [usize; 3]) -> [usize; 3] {
        [file_dims[self.perm[0]], file_dims[self.perm[1]], file_dims[self.perm[2]]]
    }

    pub fn canonical_spacing(&self, file_spacing: [f64; 3]) -> [f64; 3] {
        [
            file_spacing[self.perm[0]],
            file_spacing[self.perm[1]],
            file_spacing[self.perm[2]],
        ]
    }

    pub fn file_dims(&self, canonical: [usize; 3]) -> [usize; 3] {
        let mut out = [0; 3];
        for i in 0..3 {
            out[self.perm[i]] = canonical[i];
        }
        out
    }

    pub fn file_spacing(&self, canonical: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[self.perm[i]] = canonical[i];
        }
        out
    }

    /// Reorders file-layout data into the canonical grid.
    pub fn to_canonical<T: Copy>(&self, file_dims: [usize; 3], data: &[T]) -> Vec<T> {
        let dims = self.canonical_dims(file_dims);
        let mut out = Vec::with_capacity(data.len());
        let mut f = [0usize; 3];
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    for (i, c) in [x, y, z].into_iter().enumerate() {
                        f[self.perm[i]] = if self.flip[i] { dims[i] - 1 - c } else { c };
                    }
                    out.push(data[f[0] + file_dims[0] * (f[1] + file_dims[1] * f[2])]);
                }
            }
        }
        out
    }

    /// Inverse of [`Orientation::to_canonical`].
    pub fn to_file<T: Copy + Default>(&self, canonical_dims: [usize; 3], data: &[T]) -> Vec<T> {
        let file_dims = self.file_dims(canonical_dims);
        let mut out = vec![T::default(); data.len()];
        let mut f = [0usize; 3];
        let mut src = 0;
        for z in 0..canonical_dims[2] {
            for y in 0..canonical_dims[1] {
                for x in 0..canonical_dims[0] {
                    for (i, c) in [x, y, z].into_iter().enumerate() {
                        f[self.perm[i]] = if self.flip[i] { canonical_dims[i] - 1 - c } else { c };
                    }
                    out[f[0] + file_dims[0] * (f[1] + file_dims[1] * f[2])] = data[src];
                    src += 1;
                }
            }
        }
        out
    }
}

/// Dense 3D scalar grid with physical spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    kind: VolumeKind,
    orientation: Orientation,
    /// Voxel-to-world affine of the source file, kept so results can be
    /// written back on the same grid.
    affine: Option<[[f64; 4]; 3]>,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        if dims.contains(&0) {
            return Err(VolumeError::EmptyDims(dims));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::DataLength {
                dims,
                actual: data.len(),
            });
        }
        if kind == VolumeKind::BinaryMask {
            if let Some(&bad) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(VolumeError::NotBinary(bad));
            }
        }
        Ok(Self {
            dims,
            spacing,
            kind,
            orientation: Orientation::IDENTITY,
            affine: None,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], kind: VolumeKind, value: f32) -> Result<Self, VolumeError> {
        let n = dims.iter().product();
        Self::new(dims, spacing, kind, vec![value; n])
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, VolumeError> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, kind, data)
    }

    /// Binary mask from a predicate.
    pub fn mask_from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self, VolumeError> {
        Self::from_fn(dims, spacing, VolumeKind::BinaryMask, |x, y, z| f(x, y, z) as u8 as f32)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    pub fn affine(&self) -> Option<&[[f64; 4]; 3]> {
        self.affine.as_ref()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.offset(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.offset(x, y, z);
        self.data[i] = value;
    }

    /// Coordinates of a linear offset.
    #[inline]
    pub fn coords(&self, offset: usize) -> [usize; 3] {
        let x = offset % self.dims[0];
        let rest = offset / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Foreground test for masks (and a `> 0` threshold for anything else).
    #[inline]
    pub fn is_foreground(&self, offset: usize) -> bool {
        self.data[offset] > 0.0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    /// Same geometry and metadata, new contents.
    pub fn with_data(&self, kind: VolumeKind, data: Vec<f32>) -> Result<Self, VolumeError> {
        let mut v = Self::new(self.dims, self.spacing, kind, data)?;
        v.orientation = self.orientation;
        v.affine = self.affine;
        Ok(v)
    }

    pub fn map(&self, kind: VolumeKind, f: impl Fn(f32) -> f32) -> Result<Self, VolumeError> {
        self.with_data(kind, self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn set_file_metadata(&mut self, orientation: Orientation, affine: Option<[[f64; 4]; 3]>) {
        self.orientation = orientation;
        self.affine = affine;
    }

    /// Reverts the load-time reorientation, returning `(file_dims,
    /// file_spacing, file_data)`.
    pub fn to_file_layout(&self) -> ([usize; 3], [f64; 3], Vec<f32>) {
        (
            self.orientation.file_dims(self.dims),
            self.orientation.file_spacing(self.spacing),
            self.orientation.to_file(self.dims, &self.data),
        )
    }

    pub fn ensure_same_dims(&self, other: &Volume) -> Result<(), VolumeError> {
        if self.dims != other.dims {
            return Err(VolumeError::DimensionMismatch {
                expected: self.dims,
                actual: other.dims,
            });
        }
        Ok(())
    }

    pub fn slices(&self, axis: Axis) -> SliceSequence<'_> {
        reslice(self, axis)
    }
}

/// 2D scalar grid, `u`-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Grid2 {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length");
        Self { width, height, data }
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[u + self.width * v]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: f32) {
        self.data[u + self.width * v] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Ordered slices of a volume along one axis.
#[derive(Debug, Clone, Copy)]
pub struct SliceSequence<'a> {
    volume: &'a Volume,
    axis: Axis,
}

pub fn reslice(volume: &Volume, axis: Axis) -> SliceSequence<'_> {
    SliceSequence { volume, axis }
}

impl<'a> SliceSequence<'a> {
    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn source(&self) -> &'a Volume {
        self.volume
    }

    /// Number of slices `D`.
    pub fn len(&self) -> usize {
        self.volume.dims[self.axis.index()]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// In-plane `(width, height)`.
    pub fn plane_dims(&self) -> (usize, usize) {
        let (a, b) = self.axis.in_plane();
        (self.volume.dims[a], self.volume.dims[b])
    }

    /// Sequence-frame dims `(width, height, D)`.
    pub fn frame_dims(&self) -> [usize; 3] {
        let (w, h) = self.plane_dims();
        [w, h, self.len()]
    }

    pub fn slice(&self, t: usize) -> Grid2 {
        assert!(t < self.len(), "slice {t} out of range for {} slices", self.len());
        let (w, h) = self.plane_dims();
        let mut data = Vec::with_capacity(w * h);
        let v = self.volume;
        match self.axis {
            Axis::Axial => {
                let start = v.offset(0, 0, t);
                data.extend_from_slice(&v.data[start..start + w * h]);
            }
            Axis::Coronal => {
                for z in 0..h {
                    let start = v.offset(0, t, z);
                    data.extend_from_slice(&v.data[start..start + w]);
                }
            }
            Axis::Sagittal => {
                for z in 0..h {
                    for y in 0..w {
                        data.push(v.get(t, y, z));
                    }
                }
            }
        }
        Grid2::new(w, h, data)
    }

    pub fn iter(&self) -> impl Iterator<Item = Grid2> + '_ {
        (0..self.len()).map(move |t| self.slice(t))
    }
}

/// Volume coordinates of sequence-frame position `(u, v, t)` along `axis`.
#[inline]
pub fn sequence_to_volume(axis: Axis, u: usize, v: usize, t: usize) -> [usize; 3] {
    match axis {
        Axis::Axial => [u, v, t],
        Axis::Coronal => [u, t, v],
        Axis::Sagittal => [t, u, v],
    }
}

/// Reassembles slices taken along `axis` into a volume shaped like `like`.
pub fn stack(slices: &[Grid2], axis: Axis, like: &Volume, kind: VolumeKind) -> Result<Volume, VolumeError> {
    let seq = reslice(like, axis);
    if slices.len() != seq.len() {
        return Err(VolumeError::SliceCount {
            expected: seq.len(),
            actual: slices.len(),
        });
    }
    let (w, h) = seq.plane_dims();
    let mut data = vec![0.0f32; like.len()];
    for (t, s) in slices.iter().enumerate() {
        if s.width != w || s.height != h {
            return Err(VolumeError::DimensionMismatch {
                expected: [w, h, 1],
                actual: [s.width, s.height, 1],
            });
        }
        for v in 0..h {
            for u in 0..w {
                let [x, y, z] = sequence_to_volume(axis, u, v, t);
                data[like.offset(x, y, z)] = s.get(u, v);
            }
        }
    }
    like.with_data(kind, data)
}

/// Which grid a [`LogitVolume`] is laid out on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitFrame {
    /// `(u, v, t)` along the propagation axis.
    Sequence,
    /// The reference volume's `(x, y, z)`.
    Reference,
}

/// Per-voxel logits from one propagation pass.
///
/// `produced[t]` records whether slice `t` along `axis` received output;
/// voxels of unproduced slices hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVolume {
    axis: Axis,
    frame: LogitFrame,
    dims: [usize; 3],
    data: Vec<f32>,
    produced: Vec<bool>,
}

impl LogitVolume {
    /// Empty sequence-frame volume for a pass over `seq`.
    pub fn for_sequence(seq: &SliceSequence<'_>) -> Self {
        let dims = seq.frame_dims();
        Self {
            axis: seq.axis(),
            frame: LogitFrame::Sequence,
            dims,
            data: vec![0.0; dims.iter().product()],
            produced: vec![false; dims[2]],
        }
    }

    pub fn from_parts(
        axis: Axis,
        frame: LogitFrame,
        dims: [usize; 3],
        data: Vec<f32>,
        produced: Vec<bool>,
    ) -> Result<Self, VolumeError> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(VolumeError::DataLength { dims, actual: data.len() });
        }
        let slices = match frame {
            LogitFrame::Sequence => dims[2],
            LogitFrame::Reference => dims[axis.index()],
        };
        if produced.len() != slices {
            return Err(VolumeError::SliceCount {
                expected: slices,
                actual: produced.len(),
            });
        }
        Ok(Self { axis, frame, dims, data, produced })
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn frame(&self) -> LogitFrame {
        self.frame
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn produced(&self) -> &[bool] {
        &self.produced
    }

    pub fn is_produced(&self, t: usize) -> bool {
        self.produced[t]
    }

    pub fn produced_count(&self) -> usize {
        self.produced.iter().filter(|&&p| p).count()
    }

    /// Writes a slice row in sequence frame.
    pub fn set_slice(&mut self, t: usize, logits: &Grid2) {
        assert_eq!(self.frame, LogitFrame::Sequence);
        let n = self.dims[0] * self.dims[1];
        assert_eq!(logits.len(), n, "slice logits size");
        self.data[t * n..(t + 1) * n].copy_from_slice(&logits.data);
        self.produced[t] = true;
    }

    pub fn slice(&self, t: usize) -> Grid2 {
        assert_eq!(self.frame, LogitFrame::Sequence);
        let n = self.dims[0] * self.dims[1];
        Grid2::new(self.dims[0], self.dims[1], self.data[t * n..(t + 1) * n].to_vec())
    }

    /// Whether the voxel at linear offset `i` lies on a produced slice.
    pub fn covers(&self, i: usize) -> bool {
        let [w, h, _] = self.dims;
        let c = [i % w, (i / w) % h, i / (w * h)];
        let t = match self.frame {
            LogitFrame::Sequence => c[2],
            LogitFrame::Reference => c[self.axis.index()],
        };
        self.produced[t]
    }

    /// Strictly positive logits as a mask on `reference`'s grid. The volume
    /// must already be in the reference frame.
    pub fn to_mask(&self, reference: &Volume) -> Result<Volume, VolumeError> {
        let l = reorient_to_reference(self, reference)?;
        reference.with_data(
            VolumeKind::BinaryMask,
            l.data.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Voxel-wise combination of two passes over the same grid. Where both
    /// passes produced output `both` is applied; otherwise the single
    /// available value is kept.
    pub fn merge_with(&self, other: &LogitVolume, both: impl Fn(f32, f32) -> f32) -> Result<Self, VolumeError> {
        if self.dims != other.dims || self.frame != other.frame || self.axis != other.axis {
            return Err(VolumeError::DimensionMismatch {
                expected: self.dims,
                actual: other.dims,
            });
        }
        let n = self.dims[0] * self.dims[1];
        let mut data = vec![0.0; self.data.len()];
        let mut produced = vec![false; self.produced.len()];
        for i in 0..data.len() {
            let t = match self.frame {
                LogitFrame::Sequence => i / n,
                LogitFrame::Reference => {
                    let w = self.dims[0];
                    let h = self.dims[1];
                    [i % w, (i / w) % h, i / n][self.axis.index()]
                }
            };
            let (a, b) = (self.produced[t], other.produced[t]);
            data[i] = match (a, b) {
                (true, true) => both(self.data[i], other.data[i]),
                (true, false) => self.data[i],
                (false, true) => other.data[i],
                (false, false) => 0.0,
            };
            produced[t] = a || b;
        }
        Ok(Self {
            axis: self.axis,
            frame: self.frame,
            dims: self.dims,
            data,
            produced,
        })
    }
}

/// Maps logits produced along any axis onto `reference`'s `(x, y, z)` grid.
///
/// The permutation comes from the recorded propagation axis; shapes are only
/// checked, never used to guess the mapping.
pub fn reorient_to_reference(l: &LogitVolume, reference: &Volume) -> Result<LogitVolume, VolumeError> {
    let ref_dims = reference.dims();
    match l.frame {
        LogitFrame::Reference => {
            if l.dims != ref_dims {
                return Err(VolumeError::DimensionMismatch {
                    expected: ref_dims,
                    actual: l.dims,
                });
            }
            Ok(l.clone())
        }
        LogitFrame::Sequence => {
            let (a, b) = l.axis.in_plane();
            let mut mapped = [0; 3];
            mapped[a] = l.dims[0];
            mapped[b] = l.dims[1];
            mapped[l.axis.index()] = l.dims[2];
            if mapped != ref_dims {
                return Err(VolumeError::DimensionMismatch {
                    expected: ref_dims,
                    actual: mapped,
                });
            }
            let [w, h, d] = l.dims;
            let mut data = vec![0.0; l.data.len()];
            for t in 0..d {
                for v in 0..h {
                    for u in 0..w {
                        let [x, y, z] = sequence_to_volume(l.axis, u, v, t);
                        data[x + ref_dims[0] * (y + ref_dims[1] * z)] = l.data[u + w * (v + h * t)];
                    }
                }
            }
            Ok(LogitVolume {
                axis: l.axis,
                frame: LogitFrame::Reference,
                dims: ref_dims,
                data,
                produced: l.produced.clone(),
            })
        }
    }
}

/// Inverse of [`reorient_to_reference`].
pub fn to_sequence_frame(l: &LogitVolume) -> LogitVolume {
    match l.frame {
        LogitFrame::Sequence => l.clone(),
        LogitFrame::Reference => {
            let (a, b) = l.axis.in_plane();
            let dims = [l.dims[a], l.dims[b], l.dims[l.axis.index()]];
            let [w, h, d] = dims;
            let mut data = vec![0.0; l.data.len()];
            for t in 0..d {
                for v in 0..h {
                    for u in 0..w {
                        let [x, y, z] = sequence_to_volume(l.axis, u, v, t);
                        data[u + w * (v + h * t)] = l.data[x + l.dims[0] * (y + l.dims[1] * z)];
                    }
                }
            }
            LogitVolume {
                axis: l.axis,
                frame: LogitFrame::Sequence,
                dims,
                data,
                produced: l.produced.clone(),
            }
        }
    }
}

/// Half-open voxel box `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl Roi {
    pub fn full(dims: [usize; 3]) -> Self {
        Roi { min: [0; 3], max: dims }
    }

    /// Tight box around the mask's foreground, `None` when empty.
    pub fn bounding_box(mask: &Volume) -> Option<Self> {
        let mut min = [usize::MAX; 3];
        let mut max = [0; 3];
        let mut any = false;
        for (i, &v) in mask.data().iter().enumerate() {
            if v > 0.0 {
                any = true;
                let c = mask.coords(i);
                for k in 0..3 {
                    min[k] = min[k].min(c[k]);
                    max[k] = max[k].max(c[k] + 1);
                }
            }
        }
        any.then_some(Roi { min, max })
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|k| self.min[k] >= self.max[k])
    }
}

/// Where a crop sits inside its source volume. Serialized as the crop
/// sidecar `{"origin": [x, y, z], "margin": m}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropInfo {
    pub origin: [usize; 3],
    pub margin: usize,
}

pub fn crop_to_roi(v: &Volume, roi: Roi, margin: usize) -> Result<(Volume, CropInfo), VolumeError> {
    let dims = v.dims();
    if roi.is_empty() || (0..3).any(|k| roi.max[k] > dims[k]) {
        return Err(VolumeError::EmptyRoi);
    }
    let lo: [usize; 3] = std::array::from_fn(|k| roi.min[k].saturating_sub(margin));
    let hi: [usize; 3] = std::array::from_fn(|k| (roi.max[k] + margin).min(dims[k]));
    let out_dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let start = v.offset(lo[0], y, z);
            data.extend_from_slice(&v.data()[start..start + out_dims[0]]);
        }
    }
    let mut out = Volume::new(out_dims, v.spacing(), v.kind(), data)?;
    out.orientation = v.orientation;
    Ok((out, CropInfo { origin: lo, margin }))
}

/// Zero-pads a cropped volume back into `reference`'s grid.
pub fn uncrop(cropped: &Volume, info: &CropInfo, reference: &Volume) -> Result<Volume, VolumeError> {
    let dims = reference.dims();
    let cd = cropped.dims();
    if (0..3).any(|k| info.origin[k] + cd[k] > dims[k]) {
        return Err(VolumeError::DimensionMismatch {
            expected: dims,
            actual: cd,
        });
    }
    let mut data = vec![0.0f32; reference.len()];
    for z in 0..cd[2] {
        for y in 0..cd[1] {
            let src = cropped.offset(0, y, z);
            let dst = reference.offset(info.origin[0], info.origin[1] + y, info.origin[2] + z);
            data[dst..dst + cd[0]].copy_from_slice(&cropped.data()[src..src + cd[0]]);
        }
    }
    reference.with_data(cropped.kind(), data)
}
