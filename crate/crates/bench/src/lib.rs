//! Deterministic inputs shared by the benchmarks.

use crossdesc_core::descnet::{ImagePatch, PointPatch};
use crossdesc_core::geomatch::Match;
use nalgebra::{Point3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn descriptors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Flattened xyzrgb rows.
pub fn point_rows(n: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n * 6)
        .map(|i| if i % 6 < 3 { r.random_range(-1.0..1.0) } else { r.random() })
        .collect()
}

pub fn point_patch(n: usize, seed: u64) -> PointPatch {
    let rows = point_rows(n, seed);
    let pts = rows.chunks(6).map(|c| std::array::from_fn(|k| c[k] as f32)).collect();
    PointPatch::new(pts).expect("valid patch")
}

pub fn image_patch(size: usize, seed: u64) -> ImagePatch {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    ImagePatch::from_fn(size, |_, _| [r.random(), r.random(), r.random()]).expect("valid patch")
}

/// Keypoints related by a fixed rigid motion, with every fifth match wrong.
pub fn keypoint_matches(n: usize, seed: u64) -> (Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<Match>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rot = Rotation3::from_euler_angles(0.1, -0.2, 0.3);
    let t = Vector3::new(0.5, -0.2, 0.1);
    let src: Vec<Point3<f64>> = (0..n)
        .map(|_| Point3::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0), r.random_range(0.0..3.0)))
        .collect();
    let dst = src.iter().map(|p| rot * p + t).collect();
    let matches = (0..n)
        .map(|i| Match { index_a: i, index_b: if i % 5 == 4 { r.random_range(0..n) } else { i }, distance: 0.0 })
        .collect();
    (src, dst, matches)
}
