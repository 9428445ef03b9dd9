//! CT intensity preprocessing: Hounsfield windowing, CLAHE and channel
//! expansion for the image encoder.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Grid2, Volume, VolumeError, VolumeKind};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocError {
    #[error("window width must be positive, got {0}")]
    BadWindow(f64),
    #[error("CLAHE tile {tile:?} has {pixels} pixels; at least 2 are required")]
    TileTooSmall { tile: (usize, usize), pixels: usize },
    #[error("CLAHE needs at least one tile per axis, got {0:?}")]
    NoTiles((usize, usize)),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Hounsfield window given as centre and width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    /// Standard radiological bone window.
    pub const BONE: WindowSpec = WindowSpec {
        level: 400.0,
        width: 1800.0,
    };

    /// Linear map of the full 12-bit CT range `[-1024, 3071]` onto `[0, 1]`.
    /// Used when windowing is disabled so the encoder still sees unit range.
    pub const FULL_RANGE: WindowSpec = WindowSpec {
        level: 1023.5,
        width: 4095.0,
    };

    pub fn new(level: f64, width: f64) -> Result<Self, PreprocError> {
        if !(width > 0.0) || !width.is_finite() {
            return Err(PreprocError::BadWindow(width));
        }
        Ok(Self { level, width })
    }

    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        let lo = self.level - self.width / 2.0;
        let t = (hu as f64 - lo) / self.width;
        t.clamp(0.0, 1.0) as f32
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self::BONE
    }
}

/// Clamps to `[level - width/2, level + width/2]` and rescales to `[0, 1]`.
pub fn hu_window(v: &Volume, w: WindowSpec) -> Result<Volume, PreprocError> {
    WindowSpec::new(w.level, w.width)?;
    Ok(v.map(VolumeKind::Normalized, |x| w.apply(x))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaheParams {
    /// Histogram clip limit as a multiple of the mean bin count. Infinite
    /// disables clipping.
    pub clip_limit: f64,
    /// Tile grid `(nx, ny)`.
    pub tiles: (usize, usize),
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            clip_limit: 2.0,
            tiles: (8, 8),
        }
    }
}

const BINS: usize = 256;

#[inline]
fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * BINS as f32) as usize).min(BINS - 1)
}

/// Per-tile lookup tables plus the geometry needed to blend them.
#[derive(Debug, Clone)]
pub struct ClaheMap {
    bounds_u: Vec<usize>,
    bounds_v: Vec<usize>,
    centers_u: Vec<f64>,
    centers_v: Vec<f64>,
    luts: Vec<[f32; BINS]>,
}

fn tile_bounds(extent: usize, n: usize) -> Vec<usize> {
    (0..=n).map(|i| i * extent / n).collect()
}

/// Lower tile index and blend weight toward the next tile.
fn blend(centers: &[f64], pos: f64) -> (usize, usize, f64) {
    let last = centers.len() - 1;
    if pos <= centers[0] {
        return (0, 0, 0.0);
    }
    if pos >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.partition_point(|&c| c <= pos) - 1;
    let w = (pos - centers[i]) / (centers[i + 1] - centers[i]);
    (i, i + 1, w)
}

impl ClaheMap {
    pub fn build(slice: &Grid2, params: ClaheParams) -> Result<Self, PreprocError> {
        let (nx, ny) = params.tiles;
        if nx == 0 || ny == 0 {
            return Err(PreprocError::NoTiles(params.tiles));
        }
        let bounds_u = tile_bounds(slice.width, nx);
        let bounds_v = tile_bounds(slice.height, ny);
        let mut luts = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let pixels = (bounds_u[i + 1] - bounds_u[i]) * (bounds_v[j + 1] - bounds_v[j]);
                if pixels < 2 {
                    return Err(PreprocError::TileTooSmall { tile: (i, j), pixels });
                }
                let mut hist = [0f64; BINS];
                for v in bounds_v[j]..bounds_v[j + 1] {
                    for u in bounds_u[i]..bounds_u[i + 1] {
                        hist[bin_of(slice.get(u, v))] += 1.0;
                    }
                }
                if params.clip_limit.is_finite() && params.clip_limit > 0.0 {
                    let limit = (params.clip_limit * pixels as f64 / BINS as f64).max(1.0);
                    let mut excess = 0.0;
                    for h in hist.iter_mut() {
                        if *h > limit {
                            excess += *h - limit;
                            *h = limit;
                        }
                    }
                    let share = excess / BINS as f64;
                    for h in hist.iter_mut() {
                        *h += share;
                    }
                }
                let total = pixels as f64;
                let mut lut = [0f32; BINS];
                let mut cdf = 0.0;
                for (b, h) in hist.iter().enumerate() {
                    cdf += h;
                    lut[b] = (cdf / total).clamp(0.0, 1.0) as f32;
                }
                luts.push(lut);
            }
        }
        let centers = |b: &[usize]| -> Vec<f64> {
            b.windows(2).map(|w| (w[0] + w[1] - 1) as f64 / 2.0).collect()
        };
        Ok(Self {
            centers_u: centers(&bounds_u),
            centers_v: centers(&bounds_v),
            bounds_u,
            bounds_v,
            luts,
        })
    }

    pub fn tiles(&self) -> (usize, usize) {
        (self.centers_u.len(), self.centers_v.len())
    }

    /// Pixel rectangle `[u0, u1) x [v0, v1)` of tile `(i, j)`.
    pub fn tile_rect(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        (self.bounds_u[i], self.bounds_u[i + 1], self.bounds_v[j], self.bounds_v[j + 1])
    }

    /// Pixel closest to the centre of tile `(i, j)`.
    pub fn tile_center(&self, i: usize, j: usize) -> (usize, usize) {
        (self.centers_u[i].floor() as usize, self.centers_v[j].floor() as usize)
    }

    /// Equalized value of `value` at pixel `(u, v)`.
    pub fn apply(&self, u: usize, v: usize, value: f32) -> f32 {
        let b = bin_of(value);
        let nx = self.centers_u.len();
        let (i0, i1, wu) = blend(&self.centers_u, u as f64);
        let (j0, j1, wv) = blend(&self.centers_v, v as f64);
        let l = |i: usize, j: usize| self.luts[i + nx * j][b] as f64;
        let top = (1.0 - wu) * l(i0, j0) + wu * l(i1, j0);
        let bottom = (1.0 - wu) * l(i0, j1) + wu * l(i1, j1);
        ((1.0 - wv) * top + wv * bottom).clamp(0.0, 1.0) as f32
    }
}

/// Contrast-limited adaptive histogram equalization of a `[0, 1]` slice,
/// with bilinear blending between neighbouring tile mappings.
pub fn clahe(slice: &Grid2, params: ClaheParams) -> Result<Grid2, PreprocError> {
    let map = ClaheMap::build(slice, params)?;
    let mut out = Grid2::filled(slice.width, slice.height, 0.0);
    for v in 0..slice.height {
        for u in 0..slice.width {
            out.set(u, v, map.apply(u, v, slice.get(u, v)));
        }
    }
    Ok(out)
}

/// Planar 3xHxW image as fed to the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeChannelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ThreeChannelImage {
    pub fn channel(&self, c: usize) -> Grid2 {
        assert!(c < 3);
        let n = self.width * self.height;
        Grid2::new(self.width, self.height, self.data[c * n..(c + 1) * n].to_vec())
    }
}

pub fn to_three_channel(slice: &Grid2) -> ThreeChannelImage {
    let mut data = Vec::with_capacity(slice.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&slice.data);
    }
    ThreeChannelImage {
        width: slice.width,
        height: slice.height,
        data,
    }
}

/// Preprocessing chain used by the pipeline: volume-level windowing followed
/// by optional per-slice CLAHE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preprocessor {
    /// `None` falls back to [`WindowSpec::FULL_RANGE`].
    pub window: Option<WindowSpec>,
    pub clahe: Option<ClaheParams>,
}

impl Default for Preprocessor {
    fn default() -> Self {
        Self {
            window: Some(WindowSpec::BONE),
            clahe: None,
        }
    }
}

impl Preprocessor {
    pub fn prepare_volume(&self, ct: &Volume) -> Result<Volume, PreprocError> {
        hu_window(ct, self.window.unwrap_or(WindowSpec::FULL_RANGE))
    }

    pub fn prepare_slice(&self, slice: &Grid2) -> Result<ThreeChannelImage, PreprocError> {
        match self.clahe {
            Some(p) => Ok(to_three_channel(&clahe(slice, p)?)),
            None => Ok(to_three_channel(slice)),
        }
    }
}
