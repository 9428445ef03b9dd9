//! Analytic CT phantoms with exact ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{Volume, VolumeKind};

pub const FOREGROUND_HU: f32 = 1000.0;
pub const BACKGROUND_HU: f32 = -1000.0;

#[derive(Debug, Clone)]
pub struct Phantom {
    pub name: String,
    pub ct: Volume,
    pub gt: Volume,
}

fn build(name: String, dims: [usize; 3], spacing: [f64; 3], target: impl Fn(f64, f64, f64) -> bool, other: impl Fn(f64, f64, f64) -> bool) -> Phantom {
    let ct = Volume::from_fn(dims, spacing, VolumeKind::Intensity, |x, y, z| {
        let (x, y, z) = (x as f64, y as f64, z as f64);
        if target(x, y, z) || other(x, y, z) {
            FOREGROUND_HU
        } else {
            BACKGROUND_HU
        }
    })
    .expect("phantom dims are valid");
    let gt = Volume::mask_from_fn(dims, spacing, |x, y, z| target(x as f64, y as f64, z as f64)).expect("phantom dims are valid");
    Phantom { name, ct, gt }
}

/// Uniform ball of `radius` voxels on a `size`³ grid, centred at `center`.
pub fn sphere_at(size: usize, center: [f64; 3], radius: f64) -> Phantom {
    build(
        format!("sphere-r{radius}"),
        [size; 3],
        [1.0; 3],
        move |x, y, z| {
            let d = [x - center[0], y - center[1], z - center[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= radius * radius
        },
        |_, _, _| false,
    )
}

/// Centred ball: `+1000` HU inside, `-1000` HU outside.
pub fn sphere(size: usize, radius: f64) -> Phantom {
    let c = (size / 2) as f64;
    sphere_at(size, [c; 3], radius)
}

/// Target tube drifting along x with depth, plus a same-intensity distractor
/// column standing where the tube ends up. A prompt placed on the tube's last
/// slice therefore also describes the distractor's position near the start.
pub fn drifting_tube_with_distractor() -> Phantom {
    let (z0, z1) = (2.0, 61.0);
    let r = 4.0;
    let cx = move |z: f64| 16.0 + 32.0 * (z - z0) / (z1 - z0);
    build(
        "tube-distractor".into(),
        [64; 3],
        [1.0; 3],
        move |x, y, z| (z0..=z1).contains(&z) && (x - cx(z)).powi(2) + (y - 32.0).powi(2) <= r * r,
        move |x, y, z| (2.0..=20.0).contains(&z) && (x - 48.0).powi(2) + (y - 32.0).powi(2) <= r * r,
    )
}

/// Seeded ellipsoids of varied size, position and anisotropy.
pub fn ellipsoid_suite(count: usize, seed: u64) -> Vec<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let size = 48;
            let radii = [rng.gen_range(6.0..12.0), rng.gen_range(6.0..12.0), rng.gen_range(6.0..12.0)];
            let center = [
                rng.gen_range(16.0..32.0),
                rng.gen_range(16.0..32.0),
                rng.gen_range(16.0..32.0),
            ];
            build(
                format!("ellipsoid-{i:02}"),
                [size; 3],
                [1.0; 3],
                move |x, y, z| {
                    let q = [(x - center[0]) / radii[0], (y - center[1]) / radii[1], (z - center[2]) / radii[2]];
                    q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= 1.0
                },
                |_, _, _| false,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_volume_close_to_analytic() {
        let p = sphere(64, 10.0);
        let n = p.gt.foreground_count() as f64;
        let analytic = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        assert!((n - analytic).abs() / analytic < 0.02, "{n}");
        assert_eq!(p.ct.get(32, 32, 32), FOREGROUND_HU);
        assert_eq!(p.ct.get(0, 0, 0), BACKGROUND_HU);
    }

    #[test]
    fn distractor_is_not_ground_truth() {
        let p = drifting_tube_with_distractor();
        assert_eq!(p.ct.get(48, 32, 5), FOREGROUND_HU);
        assert_eq!(p.gt.get(48, 32, 5), 0.0);
        assert_eq!(p.gt.get(48, 32, 61), 1.0);
        assert_eq!(p.gt.get(16, 32, 2), 1.0);
    }

    #[test]
    fn suite_is_seeded() {
        let a = ellipsoid_suite(3, 9);
        let b = ellipsoid_suite(3, 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.gt, y.gt);
        }
        assert_ne!(a[0].gt, a[1].gt);
    }
}
