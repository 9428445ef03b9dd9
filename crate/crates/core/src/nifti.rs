//! Minimal NIfTI-1 reader/writer (`.nii` and `.nii.gz`, little-endian).
//!
//! Supported datatypes are int16, uint8 and float32. On load the voxel grid is
//! reoriented to the canonical RAS frame; the original layout is kept in the
//! volume's [`Orientation`] so results can be saved back onto the source grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{Orientation, Volume, VolumeError, VolumeKind};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

mod offsets {
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0} (expected int16, uint8 or float32)")]
    UnsupportedDatatype(i16),
    #[error("I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    UInt8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::UInt8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Datatype::UInt8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn byte_size(self) -> usize {
        match self {
            Datatype::UInt8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }

    /// Natural storage type for a volume kind.
    pub fn for_kind(kind: VolumeKind) -> Self {
        match kind {
            VolumeKind::Intensity => Datatype::Int16,
            VolumeKind::BinaryMask => Datatype::UInt8,
            VolumeKind::Normalized | VolumeKind::Logit => Datatype::Float32,
        }
    }
}

/// Header fields this crate reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub datatype: Datatype,
    pub vox_offset: usize,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Voxel-to-world transform from sform, qform or pixdim, in that order
    /// of preference.
    pub affine: [[f64; 4]; 3],
}

fn malformed(msg: impl Into<String>) -> NiftiError {
    NiftiError::MalformedHeader(msg.into())
}

impl Header {
    pub fn parse(buf: &[u8]) -> Result<Self, NiftiError> {
        if buf.len() < HEADER_SIZE {
            return Err(malformed(format!("file is {} bytes, shorter than the header", buf.len())));
        }
        let sizeof_hdr = LittleEndian::read_i32(&buf[0..4]);
        if sizeof_hdr != HEADER_SIZE as i32 {
            if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
                return Err(malformed("big-endian files are not supported"));
            }
            return Err(malformed(format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
        }
        let magic = &buf[offsets::MAGIC..offsets::MAGIC + 4];
        if magic != b"n+1\0" {
            return Err(malformed(format!("magic {magic:?} is not single-file NIfTI-1")));
        }
        let dim: Vec<i16> = (0..8)
            .map(|i| LittleEndian::read_i16(&buf[offsets::DIM + 2 * i..]))
            .collect();
        let ndim = dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(malformed(format!("dim[0] = {ndim}")));
        }
        let mut dims = [1usize; 3];
        for k in 0..3 {
            if (k as i16) < ndim {
                if dim[k + 1] < 1 {
                    return Err(malformed(format!("dim[{}] = {}", k + 1, dim[k + 1])));
                }
                dims[k] = dim[k + 1] as usize;
            }
        }
        for k in 4..=ndim as usize {
            if dim[k] > 1 {
                return Err(malformed(format!("dim[{k}] = {} but only 3D volumes are supported", dim[k])));
            }
        }
        let datatype = Datatype::from_code(LittleEndian::read_i16(&buf[offsets::DATATYPE..]))?;
        let bitpix = LittleEndian::read_i16(&buf[offsets::BITPIX..]);
        if bitpix as usize != datatype.byte_size() * 8 {
            return Err(malformed(format!("bitpix {bitpix} inconsistent with datatype {datatype:?}")));
        }
        let pixdim: Vec<f32> = (0..8)
            .map(|i| LittleEndian::read_f32(&buf[offsets::PIXDIM + 4 * i..]))
            .collect();
        let unit_scale = match buf[offsets::XYZT_UNITS] & 0x07 {
            1 => 1000.0,
            3 => 0.001,
            _ => 1.0,
        };
        let mut spacing = [1.0f64; 3];
        for k in 0..3 {
            let s = (pixdim[k + 1] as f64).abs() * unit_scale;
            if (k as i16) < ndim {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(malformed(format!("pixdim[{}] = {}", k + 1, pixdim[k + 1])));
                }
                spacing[k] = s;
            }
        }
        let vox_offset = LittleEndian::read_f32(&buf[offsets::VOX_OFFSET..]);
        if !(vox_offset >= HEADER_SIZE as f32) {
            return Err(malformed(format!("vox_offset = {vox_offset}")));
        }
        let scl_slope = LittleEndian::read_f32(&buf[offsets::SCL_SLOPE..]);
        let scl_inter = LittleEndian::read_f32(&buf[offsets::SCL_INTER..]);
        let qform_code = LittleEndian::read_i16(&buf[offsets::QFORM_CODE..]);
        let sform_code = LittleEndian::read_i16(&buf[offsets::SFORM_CODE..]);

        let affine = if sform_code > 0 {
            let mut a = [[0.0; 4]; 3];
            for (r, row) in a.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = LittleEndian::read_f32(&buf[offsets::SROW_X + 16 * r + 4 * c..]) as f64;
                }
            }
            a
        } else if qform_code > 0 {
            let q = |i: usize| LittleEndian::read_f32(&buf[offsets::QUATERN_B + 4 * i..]) as f64;
            let o = |i: usize| LittleEndian::read_f32(&buf[offsets::QOFFSET_X + 4 * i..]) as f64;
            let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            quaternion_affine(
                [q(0), q(1), q(2)],
                [o(0), o(1), o(2)],
                [pixdim[1] as f64, pixdim[2] as f64, pixdim[3] as f64 * qfac],
            )
        } else {
            [
                [spacing[0], 0.0, 0.0, 0.0],
                [0.0, spacing[1], 0.0, 0.0],
                [0.0, 0.0, spacing[2], 0.0],
            ]
        };

        Ok(Header {
            dims,
            spacing,
            datatype,
            vox_offset: vox_offset as usize,
            scl_slope,
            scl_inter,
            affine,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = vec![0u8; VOX_OFFSET];
        LittleEndian::write_i32(&mut buf[0..4], HEADER_SIZE as i32);
        let dim: [i16; 8] = [3, self.dims[0] as i16, self.dims[1] as i16, self.dims[2] as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut buf[offsets::DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut buf[offsets::DATATYPE..], self.datatype.code());
        LittleEndian::write_i16(&mut buf[offsets::BITPIX..], (self.datatype.byte_size() * 8) as i16);
        let pixdim = [1.0, self.spacing[0], self.spacing[1], self.spacing[2], 1.0, 0.0, 0.0, 0.0];
        for (i, p) in pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut buf[offsets::PIXDIM + 4 * i..], *p as f32);
        }
        LittleEndian::write_f32(&mut buf[offsets::VOX_OFFSET..], VOX_OFFSET as f32);
        LittleEndian::write_f32(&mut buf[offsets::SCL_SLOPE..], self.scl_slope);
        LittleEndian::write_f32(&mut buf[offsets::SCL_INTER..], self.scl_inter);
        // millimetres
        buf[offsets::XYZT_UNITS] = 2;
        LittleEndian::write_i16(&mut buf[offsets::SFORM_CODE..], 1);
        for (r, row) in self.affine.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                LittleEndian::write_f32(&mut buf[offsets::SROW_X + 16 * r + 4 * c..], *v as f32);
            }
        }
        buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
        buf
    }
}

fn quaternion_affine(bcd: [f64; 3], offset: [f64; 3], scale: [f64; 3]) -> [[f64; 4]; 3] {
    let [b, c, d] = bcd;
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out
}

fn read_all(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::with_capacity(raw.len() * 4);
        MultiGzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Decodes a NIfTI-1 byte buffer into the canonical frame.
pub fn decode(buf: &[u8], kind: VolumeKind) -> Result<Volume, NiftiError> {
    let header = Header::parse(buf)?;
    let n: usize = header.dims.iter().product();
    let size = header.datatype.byte_size();
    let start = header.vox_offset;
    let end = start + n * size;
    if buf.len() < end {
        return Err(malformed(format!(
            "voxel data truncated: need {end} bytes, file has {}",
            buf.len()
        )));
    }
    let bytes = &buf[start..end];
    let mut raw: Vec<f32> = match header.datatype {
        Datatype::UInt8 => bytes.iter().map(|&b| b as f32).collect(),
        Datatype::Int16 => bytes.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f32).collect(),
        Datatype::Float32 => bytes.chunks_exact(4).map(LittleEndian::read_f32).collect(),
    };
    let slope = header.scl_slope;
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || header.scl_inter != 0.0) {
        for v in raw.iter_mut() {
            *v = *v * slope + header.scl_inter;
        }
    }
    if kind == VolumeKind::BinaryMask {
        for v in raw.iter_mut() {
            *v = if *v > 0.0 { 1.0 } else { 0.0 };
        }
    }
    let orientation = Orientation::from_affine(&header.affine);
    let data = orientation.to_canonical(header.dims, &raw);
    let mut volume = Volume::new(
        orientation.canonical_dims(header.dims),
        orientation.canonical_spacing(header.spacing),
        kind,
        data,
    )?;
    volume.set_file_metadata(orientation, Some(header.affine));
    Ok(volume)
}

/// Loads a `.nii` or `.nii.gz` file. Compression is detected from content.
pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<Volume, NiftiError> {
    decode(&read_all(path.as_ref())?, kind)
}

/// Encodes a volume onto its source file grid.
pub fn encode(volume: &Volume, datatype: Datatype) -> Vec<u8> {
    let (dims, spacing, data) = volume.to_file_layout();
    let affine = volume.affine().copied().unwrap_or([
        [spacing[0], 0.0, 0.0, 0.0],
        [0.0, spacing[1], 0.0, 0.0],
        [0.0, 0.0, spacing[2], 0.0],
    ]);
    let header = Header {
        dims,
        spacing,
        datatype,
        vox_offset: VOX_OFFSET,
        scl_slope: 1.0,
        scl_inter: 0.0,
        affine,
    };
    let mut buf = header.encode();
    buf.reserve(data.len() * datatype.byte_size());
    match datatype {
        Datatype::UInt8 => buf.extend(data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        Datatype::Int16 => {
            for v in data {
                let mut b = [0u8; 2];
                LittleEndian::write_i16(&mut b, v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16);
                buf.extend_from_slice(&b);
            }
        }
        Datatype::Float32 => {
            for v in data {
                let mut b = [0u8; 4];
                LittleEndian::write_f32(&mut b, v);
                buf.extend_from_slice(&b);
            }
        }
    }
    buf
}

/// Writes a volume; gzip-compressed when the path ends in `.gz`.
pub fn save_volume(path: impl AsRef<Path>, volume: &Volume, datatype: Datatype) -> Result<(), NiftiError> {
    let path = path.as_ref();
    let bytes = encode(volume, datatype);
    let file = BufWriter::new(File::create(path)?);
    if path.extension().is_some_and(|e| e == "gz") {
        let mut gz = GzEncoder::new(file, Compression::fast());
        gz.write_all(&bytes)?;
        gz.finish()?.flush()?;
    } else {
        let mut file = file;
        file.write_all(&bytes)?;
        file.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(value: f32) -> Volume {
        Volume::filled([2, 2, 2], [1.0; 3], VolumeKind::Intensity, value).unwrap()
    }

    #[test]
    fn int16_identity_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        save_volume(&p, &cube(100.0), Datatype::Int16).unwrap();
        let v = load_volume(&p, VolumeKind::Intensity).unwrap();
        assert_eq!(v.dims(), [2, 2, 2]);
        assert!(v.data().iter().all(|&x| x == 100.0));
    }

    #[test]
    fn gzip_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("a.nii");
        let gz = dir.path().join("a.nii.gz");
        let v = Volume::from_fn([3, 2, 4], [0.8, 0.8, 1.5], VolumeKind::Intensity, |x, y, z| {
            (x * 100 + y * 10 + z) as f32 - 500.0
        })
        .unwrap();
        save_volume(&plain, &v, Datatype::Int16).unwrap();
        save_volume(&gz, &v, Datatype::Int16).unwrap();
        let a = load_volume(&plain, VolumeKind::Intensity).unwrap();
        let b = load_volume(&gz, VolumeKind::Intensity).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.data(), v.data());
    }

    #[test]
    fn rejects_unsupported_datatype() {
        let mut bytes = encode(&cube(1.0), Datatype::Float32);
        LittleEndian::write_i16(&mut bytes[offsets::DATATYPE..], 64);
        assert!(matches!(
            decode(&bytes, VolumeKind::Intensity),
            Err(NiftiError::UnsupportedDatatype(64))
        ));
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let bytes = encode(&cube(1.0), Datatype::Float32);
        let mut bad = bytes.clone();
        bad[offsets::MAGIC] = b'x';
        assert!(matches!(decode(&bad, VolumeKind::Intensity), Err(NiftiError::MalformedHeader(_))));
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1], VolumeKind::Intensity),
            Err(NiftiError::MalformedHeader(_))
        ));
        assert!(matches!(decode(&bytes[..100], VolumeKind::Intensity), Err(NiftiError::MalformedHeader(_))));
    }

    #[test]
    fn missing_file_is_io_failure() {
        assert!(matches!(
            load_volume("/nonexistent/x.nii", VolumeKind::Intensity),
            Err(NiftiError::Io(_))
        ));
    }

    #[test]
    fn flipped_affine_is_canonicalized_and_restored() {
        // x stored right-to-left
        let v = Volume::from_fn([3, 2, 2], [1.0; 3], VolumeKind::Intensity, |x, y, z| (x + 10 * y + 100 * z) as f32)
            .unwrap();
        let mut bytes = encode(&v, Datatype::Float32);
        LittleEndian::write_f32(&mut bytes[offsets::SROW_X..], -1.0);
        let loaded = decode(&bytes, VolumeKind::Intensity).unwrap();
        assert_eq!(loaded.orientation().flip, [true, false, false]);
        assert_eq!(loaded.get(0, 0, 0), 2.0);
        assert_eq!(loaded.get(2, 1, 1), 110.0);
        let again = decode(&encode(&loaded, Datatype::Float32), VolumeKind::Intensity).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn scl_slope_applied() {
        let mut bytes = encode(&cube(10.0), Datatype::Int16);
        LittleEndian::write_f32(&mut bytes[offsets::SCL_SLOPE..], 2.0);
        LittleEndian::write_f32(&mut bytes[offsets::SCL_INTER..], -1024.0);
        let v = decode(&bytes, VolumeKind::Intensity).unwrap();
        assert!(v.data().iter().all(|&x| x == -1004.0));
    }
}
