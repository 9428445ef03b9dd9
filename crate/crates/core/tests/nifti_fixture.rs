//! Header bytes are laid out by hand here, independently of the crate's writer.

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use volprop::nifti::{load_volume, save_volume, Datatype};
use volprop::volume::VolumeKind;

const DIMS: [usize; 3] = [4, 3, 2];
const PIXDIM: [f32; 3] = [0.5, 0.75, 2.5];

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn file_value(i: usize, j: usize, k: usize) -> i16 {
    (100 * k + 10 * j + i) as i16
}

enum Transform {
    Sform([[f32; 4]; 3]),
    /// quaternion (b, c, d) with qfac
    Qform([f32; 3], f32),
    None,
}

fn fixture(t: &Transform) -> Vec<u8> {
    let mut buf = vec![0u8; 352];
    buf[0..4].copy_from_slice(&348i32.to_le_bytes());
    for (i, d) in [3i16, DIMS[0] as i16, DIMS[1] as i16, DIMS[2] as i16, 1, 1, 1, 1].iter().enumerate() {
        put_i16(&mut buf, 40 + 2 * i, *d);
    }
    put_i16(&mut buf, 70, 4); // int16
    put_i16(&mut buf, 72, 16);
    let qfac = if let Transform::Qform(_, q) = t { *q } else { 1.0 };
    for (i, p) in [qfac, PIXDIM[0], PIXDIM[1], PIXDIM[2]].iter().enumerate() {
        put_f32(&mut buf, 76 + 4 * i, *p);
    }
    put_f32(&mut buf, 108, 352.0);
    put_f32(&mut buf, 112, 1.0);
    put_f32(&mut buf, 116, -1024.0);
    buf[123] = 2;
    match t {
        Transform::Sform(rows) => {
            put_i16(&mut buf, 254, 1);
            for (r, row) in rows.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    put_f32(&mut buf, 280 + 16 * r + 4 * c, *v);
                }
            }
        }
        Transform::Qform(bcd, _) => {
            put_i16(&mut buf, 252, 1);
            for (i, v) in bcd.iter().enumerate() {
                put_f32(&mut buf, 256 + 4 * i, *v);
            }
        }
        Transform::None => {}
    }
    buf[344..348].copy_from_slice(b"n+1\0");
    for k in 0..DIMS[2] {
        for j in 0..DIMS[1] {
            for i in 0..DIMS[0] {
                buf.extend_from_slice(&file_value(i, j, k).to_le_bytes());
            }
        }
    }
    buf
}

fn write(dir: &std::path::Path, name: &str, bytes: &[u8], gzip: bool) -> std::path::PathBuf {
    let path = dir.join(name);
    if gzip {
        let mut e = GzEncoder::new(Vec::new(), Compression::default());
        e.write_all(bytes).unwrap();
        std::fs::write(&path, e.finish().unwrap()).unwrap();
    } else {
        std::fs::write(&path, bytes).unwrap();
    }
    path
}

/// Checks canonical voxel (x, y, z) against file voxel `src(x, y, z)`.
fn check(path: &std::path::Path, dims: [usize; 3], spacing: [f64; 3], src: impl Fn(usize, usize, usize) -> [usize; 3]) {
    let v = load_volume(path, VolumeKind::Intensity).unwrap();
    assert_eq!(v.dims(), dims);
    assert_eq!(v.spacing(), spacing);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let [i, j, k] = src(x, y, z);
                assert_eq!(v.get(x, y, z), file_value(i, j, k) as f32 - 1024.0, "({x},{y},{z})");
            }
        }
    }
}

#[test]
fn ras_sform_is_identity_layout() {
    let t = tempfile::tempdir().unwrap();
    let sform = [[0.5, 0.0, 0.0, 0.0], [0.0, 0.75, 0.0, 0.0], [0.0, 0.0, 2.5, 0.0]];
    let p = write(t.path(), "ras.nii", &fixture(&Transform::Sform(sform)), false);
    check(&p, DIMS, [0.5, 0.75, 2.5], |x, y, z| [x, y, z]);
}

#[test]
fn lps_sform_flips_first_two_axes() {
    let t = tempfile::tempdir().unwrap();
    let sform = [[-0.5, 0.0, 0.0, 10.0], [0.0, -0.75, 0.0, 5.0], [0.0, 0.0, 2.5, -3.0]];
    let p = write(t.path(), "lps.nii.gz", &fixture(&Transform::Sform(sform)), true);
    check(&p, DIMS, [0.5, 0.75, 2.5], |x, y, z| [3 - x, 2 - y, z]);
}

#[test]
fn qform_rotation_about_z_matches_lps() {
    // 180 degrees about z: (b, c, d) = (0, 0, 1)
    let t = tempfile::tempdir().unwrap();
    let p = write(t.path(), "q.nii.gz", &fixture(&Transform::Qform([0.0, 0.0, 1.0], 1.0)), true);
    check(&p, DIMS, [0.5, 0.75, 2.5], |x, y, z| [3 - x, 2 - y, z]);
    // qfac -1 additionally flips the third axis
    let p = write(t.path(), "qf.nii.gz", &fixture(&Transform::Qform([0.0, 0.0, 1.0], -1.0)), true);
    check(&p, DIMS, [0.5, 0.75, 2.5], |x, y, z| [3 - x, 2 - y, 1 - z]);
}

#[test]
fn permuted_sform_reorders_axes() {
    // file i -> superior, j -> right, k -> anterior
    let t = tempfile::tempdir().unwrap();
    let sform = [[0.0, 0.75, 0.0, 0.0], [0.0, 0.0, 2.5, 0.0], [0.5, 0.0, 0.0, 0.0]];
    let p = write(t.path(), "perm.nii", &fixture(&Transform::Sform(sform)), false);
    check(&p, [3, 2, 4], [0.75, 2.5, 0.5], |x, y, z| [z, x, y]);
}

#[test]
fn missing_transform_falls_back_to_pixdim() {
    let t = tempfile::tempdir().unwrap();
    let p = write(t.path(), "plain.nii", &fixture(&Transform::None), false);
    check(&p, DIMS, [0.5, 0.75, 2.5], |x, y, z| [x, y, z]);
}

#[test]
fn saving_restores_file_layout() {
    let t = tempfile::tempdir().unwrap();
    let sform = [[-0.5, 0.0, 0.0, 10.0], [0.0, -0.75, 0.0, 5.0], [0.0, 0.0, 2.5, -3.0]];
    let p = write(t.path(), "lps.nii", &fixture(&Transform::Sform(sform)), false);
    let v = load_volume(&p, VolumeKind::Intensity).unwrap();
    let out = t.path().join("out.nii");
    save_volume(&out, &v, Datatype::Float32).unwrap();
    let bytes = std::fs::read(&out).unwrap();
    let data: Vec<f32> = bytes[352..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let want: Vec<f32> = (0..24).map(|n| file_value(n % 4, (n / 4) % 3, n / 12) as f32 - 1024.0).collect();
    assert_eq!(data, want);
    for r in 0..3 {
        for c in 0..4 {
            let at = 280 + 16 * r + 4 * c;
            assert_eq!(bytes[at..at + 4], sform[r][c].to_le_bytes());
        }
    }
}

#[test]
fn malformed_headers_are_rejected() {
    let t = tempfile::tempdir().unwrap();
    let good = fixture(&Transform::None);
    let mut big_endian = good.clone();
    big_endian[0..4].copy_from_slice(&348i32.to_be_bytes());
    let mut truncated = good.clone();
    truncated.truncate(good.len() - 3);
    let mut bad_magic = good.clone();
    bad_magic[344..348].copy_from_slice(b"ni1\0");
    for (name, bytes) in [("be", big_endian), ("trunc", truncated), ("magic", bad_magic)] {
        let p = write(t.path(), name, &bytes, false);
        assert!(load_volume(&p, VolumeKind::Intensity).is_err(), "{name}");
    }
}
