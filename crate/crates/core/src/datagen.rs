//! Correspondence generation from posed RGB-D frames, and an analytic
//! ray-cast renderer for synthetic scenes with exact ground truth.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descnet::{ImagePatch, PointPatch, REFERENCE_NUM_POINTS, REFERENCE_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthMap};

pub const DEFAULT_RADIUS: f64 = 0.30;
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.05;
/// Balls with fewer points than this yield no 3D patch.
pub const MIN_PATCH_POINTS: usize = 8;
/// Minimum fraction of a 2D source window that must lie inside the image.
pub const MIN_WINDOW_INSIDE: f64 = 0.25;
const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Camera-frame direction with unit z through pixel `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Rigid camera-from-world transform `p_c = R p_w + t`. The camera looks
/// along +z with +x right and +y down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        Pose::new(m, Vector3::from(r.translation))
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| p.rotation[(i, j)])),
            translation: p.translation.into(),
        }
    }
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if !(err < 1e-6) || !(rotation.determinant() > 0.0) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pose rotation is not a proper rotation (orthonormality error {err:.3e})"
            )));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction that
    /// should appear upward in the image.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let eye = Vector3::from(eye);
        let z = Vector3::from(target) - eye;
        let down = -Vector3::from(up);
        let x = down.cross(&z);
        if z.norm() < 1e-12 || x.norm() < 1e-9 * z.norm() * down.norm() {
            return Err(Error::Degenerate(
                "look_at: eye equals target or view direction parallel to up".into(),
            ));
        }
        let z = z.normalize();
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        Self::new(r, t)
    }

    /// Row-major 4×4 matrix.
    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidArgument("pose matrix last row must be 0 0 0 1".into()));
        }
        let r = Matrix3::from_fn(|i, j| m[i][j]);
        Self::new(r, Vector3::new(m[0][3], m[1][3], m[2][3]))
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.rotation[(i, j)];
            }
            m[i][3] = self.translation[i];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn transform(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    /// Geodesic angle between the two rotations, degrees.
    pub fn rotation_angle_deg(&self, other: &Pose) -> f64 {
        rotation_angle_deg(&(self.rotation * other.rotation.transpose()))
    }
}

/// Rotation angle of `r` in degrees.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > MIN_DEPTH
    }
}

/// Pinhole projection. Points at or behind the camera plane come back with
/// `in_front() == false` and non-finite or meaningless pixel coordinates.
pub fn project(point: &Point3<f64>, k: &CameraIntrinsics, pose: &Pose) -> Projection {
    let pc = pose.transform(point);
    let z = pc.z;
    Projection {
        u: k.fx * pc.x / z + k.cx,
        v: k.fy * pc.y / z + k.cy,
        depth: z,
    }
}

pub fn backproject(u: f64, v: f64, depth: f64, k: &CameraIntrinsics, pose: &Pose) -> Point3<f64> {
    let pc = Point3::from(k.ray(u, v) * depth);
    pose.inverse().transform(&pc)
}

/// Outcome of a visibility test, with the reason for rejection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Visible,
    BehindCamera,
    OutOfFrustum,
    InvalidDepth,
    Occluded,
}

impl Visibility {
    pub fn as_str(&self) -> &'static str {
        match self {
            Visibility::Visible => "visible",
            Visibility::BehindCamera => "behind_camera",
            Visibility::OutOfFrustum => "out_of_frustum",
            Visibility::InvalidDepth => "invalid_depth",
            Visibility::Occluded => "occluded",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub index: usize,
    pub color: ColorImage,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

impl RgbdFrame {
    pub fn new(
        index: usize,
        color: ColorImage,
        depth: DepthMap,
        intrinsics: CameraIntrinsics,
        pose: Pose,
    ) -> Result<Self> {
        intrinsics.validate()?;
        let dims = [
            (color.width(), color.height()),
            (depth.width(), depth.height()),
            (intrinsics.width, intrinsics.height),
        ];
        if dims[0] != dims[1] || dims[0] != dims[2] {
            return Err(Error::shape(
                format!("frame {index}"),
                format!("color, depth and intrinsics resolutions differ: {dims:?}"),
            ));
        }
        Ok(Self {
            index,
            color,
            depth,
            intrinsics,
            pose,
        })
    }

    /// Nearest pixel of a continuous coordinate, if inside the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.round(), v.round());
        let inside = x >= 0.0
            && y >= 0.0
            && x < self.intrinsics.width as f64
            && y < self.intrinsics.height as f64;
        inside.then_some((x as usize, y as usize))
    }
}

pub fn visibility(point: &Point3<f64>, frame: &RgbdFrame, depth_tolerance: f64) -> Visibility {
    let p = project(point, &frame.intrinsics, &frame.pose);
    if !p.in_front() {
        return Visibility::BehindCamera;
    }
    let Some((x, y)) = frame.pixel_of(p.u, p.v) else {
        return Visibility::OutOfFrustum;
    };
    let stored = frame.depth.get(x, y);
    if stored <= 0.0 {
        return Visibility::InvalidDepth;
    }
    if (p.depth - stored).abs() > depth_tolerance {
        return Visibility::Occluded;
    }
    Visibility::Visible
}

pub fn visible(point: &Point3<f64>, frame: &RgbdFrame, depth_tolerance: f64) -> bool {
    visibility(point, frame, depth_tolerance) == Visibility::Visible
}

/// Colored world-space point cloud.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub colors: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>, colors: Vec<[f32; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::shape(
                "point cloud",
                format!("{} points vs {} colors", points.len(), colors.len()),
            ));
        }
        if points.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.transform(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            colors: idx.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

pub(crate) fn voxel_key(p: &Point3<f64>, size: f64) -> [i64; 3] {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Uniform hash grid for radius queries.
#[derive(Clone, Debug)]
pub struct BallIndex {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl BallIndex {
    pub fn build(points: &[Point3<f64>], cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::InvalidArgument(format!("cell size {cell} must be positive")));
        }
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Ok(Self { cell, cells })
    }

    /// Indices of points within `radius` of `center`, ascending.
    pub fn within(&self, points: &[Point3<f64>], center: &Point3<f64>, radius: f64) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let k = voxel_key(center, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(
                            ids.iter()
                                .copied()
                                .filter(|&i| (points[i] - center).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Index of the nearest point within `radius`, ties to the lowest index.
    pub fn nearest_within(&self, points: &[Point3<f64>], q: &Point3<f64>, radius: f64) -> Option<(usize, f64)> {
        let reach = (radius / self.cell).ceil() as i64;
        let k = voxel_key(q, self.cell);
        let mut best: Option<(usize, f64)> = None;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let Some(ids) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                        continue;
                    };
                    for &i in ids {
                        let d = (points[i] - q).norm();
                        if d <= radius
                            && best.is_none_or(|(bi, bd)| d < bd || (d == bd && i < bi))
                        {
                            best = Some((i, d));
                        }
                    }
                }
            }
        }
        best
    }
}

/// Seed of the sampler for patch `id` under run seed `seed`.
pub fn patch_seed(seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chooses exactly `n` of `count` indices: all of them when `count == n`, a
/// uniform subset without replacement when larger, and every index plus
/// uniform draws with replacement when smaller. Output is ascending.
pub fn resample_indices(count: usize, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = if count >= n {
        if count == n {
            (0..n).collect()
        } else {
            index::sample(rng, count, n).into_vec()
        }
    } else {
        let mut v: Vec<usize> = (0..count).collect();
        v.extend((count..n).map(|_| rng.random_range(0..count)));
        v
    };
    idx.sort_unstable();
    idx
}

/// Points of the ball around `center`, resampled to `n`, recentered and
/// scaled by `1 / radius`. `None` when the ball holds fewer than
/// [`MIN_PATCH_POINTS`] points.
pub fn extract_3d_patch(
    cloud: &PointCloud,
    index: &BallIndex,
    center: &Point3<f64>,
    radius: f64,
    n: usize,
    seed: u64,
) -> Result<Option<PointPatch>> {
    if cloud.is_empty() {
        return Err(Error::Empty("point cloud".into()));
    }
    if !(radius > 0.0) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "radius {radius} and point count {n} must be positive"
        )));
    }
    let ball = index.within(&cloud.points, center, radius);
    if ball.len() < MIN_PATCH_POINTS {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = resample_indices(ball.len(), n, &mut rng);
    let points = chosen
        .iter()
        .map(|&k| {
            let i = ball[k];
            let d = (cloud.points[i] - center) / radius;
            let c = cloud.colors[i];
            [
                (d.x as f32).clamp(-1.0, 1.0),
                (d.y as f32).clamp(-1.0, 1.0),
                (d.z as f32).clamp(-1.0, 1.0),
                c[0],
                c[1],
                c[2],
            ]
        })
        .collect();
    PointPatch::new(points).map(Some)
}

/// Footprint rule for the 2D source window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PatchWindow {
    /// Side `2 · radius · fx / depth` pixels, covering the 3D ball.
    DepthScaled { radius: f64 },
    Fixed { side: f64 },
}

impl PatchWindow {
    pub fn side(&self, fx: f64, depth: f64) -> f64 {
        match *self {
            PatchWindow::DepthScaled { radius } => 2.0 * radius * fx / depth,
            PatchWindow::Fixed { side } => side,
        }
    }
}

fn inside_fraction(center: f64, side: f64, extent: usize) -> f64 {
    let lo = (center - side / 2.0).max(-0.5);
    let hi = (center + side / 2.0).min(extent as f64 - 0.5);
    ((hi - lo) / side).clamp(0.0, 1.0)
}

/// `size × size` crop centered at `(u, v)`, bilinearly resampled from a
/// square source window of `side` pixels. `None` when less than
/// [`MIN_WINDOW_INSIDE`] of the window lies inside the image.
pub fn extract_2d_patch(
    image: &ColorImage,
    u: f64,
    v: f64,
    side: f64,
    size: usize,
) -> Result<Option<ImagePatch>> {
    if !(side > 0.0 && side.is_finite()) || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "window side {side} and patch size {size} must be positive"
        )));
    }
    let inside = inside_fraction(u, side, image.width()) * inside_fraction(v, side, image.height());
    if inside < MIN_WINDOW_INSIDE {
        return Ok(None);
    }
    let step = side / size as f64;
    let x0 = u - side / 2.0;
    let y0 = v - side / 2.0;
    ImagePatch::from_fn(size, |j, i| {
        image.sample_bilinear(x0 + (j as f64 + 0.5) * step, y0 + (i as f64 + 0.5) * step)
    })
    .map(Some)
}

/// One training pair with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrespondenceRecord {
    pub image: ImagePatch,
    pub points: PointPatch,
    pub scene: String,
    pub frame: usize,
    pub point_id: usize,
    pub center: [f64; 3],
    pub radius: f64,
    pub pixel: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<RgbdFrame>,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceConfig {
    /// Number of cloud points drawn as patch centers (ignored when
    /// `centers` is given).
    pub num_samples: usize,
    pub centers: Option<Vec<[f64; 3]>>,
    pub radius: f64,
    pub num_points: usize,
    pub patch_size: usize,
    pub window: PatchWindow,
    pub depth_tolerance: f64,
    pub max_frames_per_point: Option<usize>,
    pub seed: u64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self {
            num_samples: 256,
            centers: None,
            radius: DEFAULT_RADIUS,
            num_points: REFERENCE_NUM_POINTS,
            patch_size: REFERENCE_PATCH_SIZE,
            window: PatchWindow::DepthScaled {
                radius: DEFAULT_RADIUS,
            },
            depth_tolerance: DEFAULT_DEPTH_TOLERANCE,
            max_frames_per_point: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scene: String,
    pub frames: usize,
    pub sampled_points: usize,
    pub points_with_records: usize,
    pub records: usize,
    /// Skip counts keyed by reason; per point for `too_few_points`, per
    /// (point, frame) otherwise.
    pub skipped: BTreeMap<String, usize>,
}

/// Emits one record per (sampled point, frame) pair that passes the
/// visibility test, ordered by point id then frame index.
pub fn generate_correspondences(
    scene: &Scene,
    cfg: &CorrespondenceConfig,
) -> Result<(Vec<CorrespondenceRecord>, Manifest)> {
    if scene.frames.is_empty() {
        return Err(Error::Empty(format!("scene {} has no frames", scene.name)));
    }
    if scene.cloud.is_empty() {
        return Err(Error::Empty(format!("scene {} has an empty cloud", scene.name)));
    }
    let centers: Vec<Point3<f64>> = match &cfg.centers {
        Some(c) => c.iter().map(|&p| Point3::from(p)).collect(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let n = cfg.num_samples.min(scene.cloud.len());
            let mut idx = index::sample(&mut rng, scene.cloud.len(), n).into_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| scene.cloud.points[i]).collect()
        }
    };
    let grid = BallIndex::build(&scene.cloud.points, cfg.radius)?;
    let per_point: Vec<Result<(Vec<CorrespondenceRecord>, Vec<&'static str>)>> = centers
        .par_iter()
        .enumerate()
        .map(|(id, c)| {
            let mut skipped = Vec::new();
            let mut out = Vec::new();
            let seed = patch_seed(cfg.seed, id as u64);
            let Some(points) = extract_3d_patch(&scene.cloud, &grid, c, cfg.radius, cfg.num_points, seed)? else {
                skipped.push("too_few_points");
                return Ok((out, skipped));
            };
            for frame in &scene.frames {
                if cfg.max_frames_per_point.is_some_and(|m| out.len() >= m) {
                    break;
                }
                let vis = visibility(c, frame, cfg.depth_tolerance);
                if vis != Visibility::Visible {
                    skipped.push(vis.as_str());
                    continue;
                }
                let p = project(c, &frame.intrinsics, &frame.pose);
                let side = cfg.window.side(frame.intrinsics.fx, p.depth);
                match extract_2d_patch(&frame.color, p.u, p.v, side, cfg.patch_size)? {
                    None => skipped.push("window_outside"),
                    Some(image) => out.push(CorrespondenceRecord {
                        image,
                        points: points.clone(),
                        scene: scene.name.clone(),
                        frame: frame.index,
                        point_id: id,
                        center: [c.x, c.y, c.z],
                        radius: cfg.radius,
                        pixel: [p.u, p.v],
                    }),
                }
            }
            Ok((out, skipped))
        })
        .collect();
    let mut manifest = Manifest {
        scene: scene.name.clone(),
        frames: scene.frames.len(),
        sampled_points: centers.len(),
        ..Default::default()
    };
    let mut records = Vec::new();
    for r in per_point {
        let (recs, skipped) = r?;
        if !recs.is_empty() {
            manifest.points_with_records += 1;
        }
        for s in skipped {
            *manifest.skipped.entry(s.to_string()).or_default() += 1;
        }
        records.extend(recs);
    }
    manifest.records = records.len();
    Ok((records, manifest))
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Procedural color field `0.5 + 0.4 · sin(w_c · p + phase_c)` per channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Texture {
    pub frequencies: [[f64; 3]; 3],
    pub phases: [f64; 3],
}

impl Texture {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            frequencies: std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-7.0..7.0))),
            phases: std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU)),
        }
    }

    pub fn color(&self, p: &Point3<f64>) -> [f32; 3] {
        std::array::from_fn(|c| {
            let w = Vector3::from(self.frequencies[c]);
            (0.5 + 0.4 * (w.dot(&p.coords) + self.phases[c]).sin()) as f32
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Primitive {
    /// Infinite plane, or a square of half side `half_size` around `point`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        #[serde(default)]
        half_size: Option<f64>,
    },
    /// Axis-aligned box, visible from outside and from inside.
    Box { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

fn plane_axes(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let e = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
        Vector3::x()
    } else if n.y.abs() <= n.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let a = n.cross(&e).normalize();
    (a, n.cross(&a))
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Plane { normal, half_size, .. } => {
                Vector3::from(*normal).norm() > 1e-12 && half_size.is_none_or(|h| h > 0.0)
            }
            Primitive::Box { min, max } => (0..3).all(|i| min[i] < max[i]),
            Primitive::Sphere { radius, .. } => *radius > 0.0,
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("degenerate primitive {self:?}")));
        }
        Ok(())
    }

    /// Smallest ray parameter `t > eps` with `origin + t·dir` on the surface.
    pub fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        const EPS: f64 = 1e-9;
        match self {
            Primitive::Plane {
                point,
                normal,
                half_size,
            } => {
                let n = Vector3::from(*normal).normalize();
                let denom = n.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let p0 = Point3::from(*point);
                let t = n.dot(&(p0 - origin)) / denom;
                if t <= EPS {
                    return None;
                }
                if let Some(h) = half_size {
                    let (a, b) = plane_axes(&n);
                    let d = origin + dir * t - p0;
                    if d.dot(&a).abs() > *h || d.dot(&b).abs() > *h {
                        return None;
                    }
                }
                Some(t)
            }
            Primitive::Box { min, max } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if dir[i].abs() < 1e-15 {
                        if origin[i] < min[i] || origin[i] > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (min[i] - origin[i]) / dir[i];
                    let b = (max[i] - origin[i]) / dir[i];
                    t0 = t0.max(a.min(b));
                    t1 = t1.min(a.max(b));
                }
                if t0 > t1 {
                    None
                } else if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - Point3::from(*center);
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let q = if b >= 0.0 { -0.5 * (b + s) } else { -0.5 * (b - s) };
                let (r0, r1) = (q / a, c / q);
                let (lo, hi) = if r0 <= r1 { (r0, r1) } else { (r1, r0) };
                if lo > EPS {
                    Some(lo)
                } else if hi > EPS {
                    Some(hi)
                } else {
                    None
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Surface {
    pub primitive: Primitive,
    /// Drawn from the scene seed when absent.
    #[serde(default)]
    pub texture: Option<Texture>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraSpec {
    LookAt {
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
    },
    /// Camera-from-world, row-major 4×4.
    Matrix { matrix: [[f64; 4]; 4] },
}

impl CameraSpec {
    pub fn pose(&self) -> Result<Pose> {
        match self {
            CameraSpec::LookAt { eye, target, up } => Pose::look_at(*eye, *target, *up),
            CameraSpec::Matrix { matrix } => Pose::from_matrix4(matrix),
        }
    }
}

fn default_cloud_voxel() -> f64 {
    0.02
}

fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub surfaces: Vec<Surface>,
    pub cameras: Vec<CameraSpec>,
    /// Voxel size used to thin the fused cloud.
    #[serde(default = "default_cloud_voxel")]
    pub cloud_voxel: f64,
    /// Pixel stride when back-projecting frames into the fused cloud.
    #[serde(default = "default_stride")]
    pub cloud_stride: usize,
}

pub fn default_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 120.0,
        fy: 120.0,
        cx: 79.5,
        cy: 59.5,
        width: 160,
        height: 120,
    }
}

impl SceneSpec {
    /// Moves every surface and camera by `t`.
    pub fn translate(&mut self, t: [f64; 3]) {
        let add = |p: &mut [f64; 3]| (0..3).for_each(|i| p[i] += t[i]);
        for s in &mut self.surfaces {
            match &mut s.primitive {
                Primitive::Plane { point, .. } => add(point),
                Primitive::Box { min, max } => {
                    add(min);
                    add(max);
                }
                Primitive::Sphere { center, .. } => add(center),
            }
        }
        for c in &mut self.cameras {
            match c {
                CameraSpec::LookAt { eye, target, .. } => {
                    add(eye);
                    add(target);
                }
                CameraSpec::Matrix { matrix } => {
                    // camera-from-world: t' = t - R·shift
                    for r in 0..3 {
                        matrix[r][3] -= (0..3).map(|j| matrix[r][j] * t[j]).sum::<f64>();
                    }
                }
            }
        }
    }

    /// One fronto-parallel plane at depth `z` seen by an identity camera.
    pub fn plane(z: f64, intrinsics: CameraIntrinsics) -> Self {
        Self {
            name: "plane".into(),
            intrinsics,
            surfaces: vec![Surface {
                primitive: Primitive::Plane {
                    point: [0.0, 0.0, z],
                    normal: [0.0, 0.0, -1.0],
                    half_size: None,
                },
                texture: None,
            }],
            cameras: vec![CameraSpec::Matrix {
                matrix: Pose::identity().to_matrix4(),
            }],
            cloud_voxel: default_cloud_voxel(),
            cloud_stride: 1,
        }
    }

    /// A textured room (`z` up) with boxes and spheres on the floor and
    /// `cameras` views on a circle looking inward.
    pub fn room(seed: u64, cameras: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut surfaces = vec![Surface {
            primitive: Primitive::Box {
                min: [-2.5, -2.5, 0.0],
                max: [2.5, 2.5, 2.5],
            },
            texture: None,
        }];
        for _ in 0..4 {
            let c = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            let h = [rng.random_range(0.2..0.45), rng.random_range(0.2..0.45), rng.random_range(0.3..0.9)];
            surfaces.push(Surface {
                primitive: Primitive::Box {
                    min: [c[0] - h[0], c[1] - h[1], 0.0],
                    max: [c[0] + h[0], c[1] + h[1], h[2]],
                },
                texture: None,
            });
        }
        for _ in 0..3 {
            let r = rng.random_range(0.2..0.4);
            surfaces.push(Surface {
                primitive: Primitive::Sphere {
                    center: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), r + rng.random_range(0.0..0.8)],
                    radius: r,
                },
                texture: None,
            });
        }
        let cams = (0..cameras)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / cameras as f64;
                let eye = [2.0 * a.cos(), 2.0 * a.sin(), 1.4];
                let target = [-0.8 * a.cos() + 0.3 * (3.0 * a).sin(), -0.8 * a.sin(), 0.4];
                CameraSpec::LookAt {
                    eye,
                    target,
                    up: [0.0, 0.0, 1.0],
                }
            })
            .collect();
        Self {
            name: format!("room-{seed}"),
            intrinsics: default_intrinsics(),
            surfaces,
            cameras: cams,
            cloud_voxel: default_cloud_voxel(),
            cloud_stride: 1,
        }
    }
}

/// Resolved scene geometry that can be ray cast.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub surfaces: Vec<(Primitive, Texture)>,
}

impl SceneModel {
    pub fn new(spec: &SceneSpec, seed: u64) -> Result<Self> {
        if spec.surfaces.is_empty() {
            return Err(Error::InvalidArgument(format!("scene {} has no surfaces", spec.name)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let surfaces = spec
            .surfaces
            .iter()
            .map(|s| {
                s.primitive.validate()?;
                let drawn = Texture::random(&mut rng);
                Ok((s.primitive.clone(), s.texture.unwrap_or(drawn)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { surfaces })
    }

    /// Nearest hit `(t, surface index)` along the ray.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, (prim, _)) in self.surfaces.iter().enumerate() {
            if let Some(t) = prim.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    pub fn color_at(&self, surface: usize, p: &Point3<f64>) -> [f32; 3] {
        self.surfaces[surface].1.color(p)
    }

    /// Exact depth and color images for a camera.
    pub fn render(&self, k: &CameraIntrinsics, pose: &Pose) -> Result<(ColorImage, DepthMap)> {
        let inv = pose.inverse();
        let origin = pose.center();
        let rows: Vec<(Vec<[f32; 3]>, Vec<f64>)> = (0..k.height)
            .into_par_iter()
            .map(|y| {
                let mut colors = Vec::with_capacity(k.width);
                let mut depths = Vec::with_capacity(k.width);
                for x in 0..k.width {
                    let dir = inv.rotation * k.ray(x as f64, y as f64);
                    match self.cast(&origin, &dir) {
                        Some((t, s)) => {
                            colors.push(self.color_at(s, &(origin + dir * t)));
                            depths.push(t);
                        }
                        None => {
                            colors.push([0.0; 3]);
                            depths.push(0.0);
                        }
                    }
                }
                (colors, depths)
            })
            .collect();
        let (c, d): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
        Ok((
            ColorImage::new(k.width, k.height, c.concat())?,
            DepthMap::new(k.width, k.height, d.concat())?,
        ))
    }
}

/// Renders every camera and fuses the visible surfaces into a cloud thinned
/// to one point per `cloud_voxel` cell (first in frame, row, column order).
pub fn synth_scene(seed: u64, spec: &SceneSpec) -> Result<Scene> {
    if spec.cameras.is_empty() {
        return Err(Error::InvalidArgument(format!("scene {} has no cameras", spec.name)));
    }
    if !(spec.cloud_voxel > 0.0) || spec.cloud_stride == 0 {
        return Err(Error::InvalidArgument("cloud_voxel and cloud_stride must be positive".into()));
    }
    spec.intrinsics.validate()?;
    let model = SceneModel::new(spec, seed)?;
    let k = spec.intrinsics;
    let mut frames = Vec::with_capacity(spec.cameras.len());
    for (i, cam) in spec.cameras.iter().enumerate() {
        let pose = cam.pose()?;
        let (color, depth) = model.render(&k, &pose)?;
        frames.push(RgbdFrame::new(i, color, depth, k, pose)?);
    }
    let mut seen = std::collections::HashSet::new();
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for f in &frames {
        let origin = f.pose.center();
        let inv = f.pose.inverse();
        for y in (0..k.height).step_by(spec.cloud_stride) {
            for x in (0..k.width).step_by(spec.cloud_stride) {
                let d = f.depth.get(x, y);
                if d <= 0.0 {
                    continue;
                }
                let p = origin + inv.rotation * k.ray(x as f64, y as f64) * d;
                if seen.insert(voxel_key(&p, spec.cloud_voxel)) {
                    let (_, s) = model
                        .cast(&origin, &(inv.rotation * k.ray(x as f64, y as f64)))
                        .expect("pixel with depth has a hit");
                    points.push(p);
                    colors.push(model.color_at(s, &p));
                }
            }
        }
    }
    Ok(Scene {
        name: spec.name.clone(),
        frames,
        cloud: PointCloud::new(points, colors)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let r = nalgebra::Rotation3::new(axis * rng.random_range(0.0..3.0));
        let t = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        Pose::new(*r.matrix(), t).unwrap()
    }

    #[test]
    fn projection_cases() {
        let p = project(&Point3::new(0.0, 0.0, 1.0), &k100(), &Pose::identity());
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 1.0));
        let p = project(&Point3::new(0.5, 0.0, 1.0), &k100(), &Pose::identity());
        assert_eq!((p.u, p.v, p.depth), (100.0, 50.0, 1.0));
        assert!(!project(&Point3::new(0.0, 0.0, -1.0), &k100(), &Pose::identity()).in_front());
    }

    #[test]
    fn projection_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..10_000 {
            let k = CameraIntrinsics::new(
                rng.random_range(50.0..600.0),
                rng.random_range(50.0..600.0),
                rng.random_range(0.0..320.0),
                rng.random_range(0.0..240.0),
                320,
                240,
            )
            .unwrap();
            let pose = random_pose(&mut rng);
            let p = Point3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let pr = project(&p, &k, &pose);
            if !pr.in_front() {
                continue;
            }
            let back = backproject(pr.u, pr.v, pr.depth, &k, &pose);
            worst = worst.max((back - p).norm());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn look_at_points_z_toward_target() {
        let pose = Pose::look_at([1.0, 2.0, 3.0], [1.0, 2.0, 5.0], [0.0, -1.0, 0.0]).unwrap();
        let p = project(&Point3::new(1.0, 2.0, 5.0), &k100(), &pose);
        assert!((p.u - 50.0).abs() < 1e-12 && (p.v - 50.0).abs() < 1e-12);
        assert!((p.depth - 2.0).abs() < 1e-12);
        assert!((pose.center() - Point3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        // world up appears upward (smaller v)
        let up = project(&Point3::new(1.0, 1.5, 5.0), &k100(), &pose);
        assert!(up.v < 50.0);
        assert!(Pose::look_at([0.0; 3], [0.0; 3], [0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = -1.0;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
        m[(0, 0)] = 1.1;
        assert!(Pose::new(m, Vector3::zeros()).is_err());
    }

    #[test]
    fn pose_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let s = serde_json::to_string(&p).unwrap();
        let q: Pose = serde_json::from_str(&s).unwrap();
        assert_eq!(p, q);
    }

    fn plane_scene(z: f64) -> Scene {
        synth_scene(7, &SceneSpec::plane(z, k100())).unwrap()
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let s = plane_scene(2.0);
        assert!(s.frames[0].depth.data().iter().all(|&d| d == 2.0));
    }

    #[test]
    fn rendered_depth_matches_analytic_rays() {
        let spec = SceneSpec::room(11, 3);
        let scene = synth_scene(11, &spec).unwrap();
        let model = SceneModel::new(&spec, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = spec.intrinsics;
        for f in &scene.frames {
            for _ in 0..100 {
                let (x, y) = (rng.random_range(0..k.width), rng.random_range(0..k.height));
                let d = k.ray(x as f64, y as f64);
                let dir = f.pose.rotation.transpose() * d;
                // independent oracle: brute force over surfaces
                let want = spec
                    .surfaces
                    .iter()
                    .filter_map(|s| s.primitive.intersect(&f.pose.center(), &dir))
                    .fold(f64::INFINITY, f64::min);
                assert!((f.depth.get(x, y) - want).abs() < 1e-9);
            }
        }
        assert_eq!(model.surfaces.len(), spec.surfaces.len());
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SceneSpec::room(3, 2);
        assert_eq!(synth_scene(3, &spec).unwrap(), synth_scene(3, &spec).unwrap());
        let mut empty = spec.clone();
        empty.surfaces.clear();
        assert!(synth_scene(3, &empty).is_err());
    }

    #[test]
    fn visibility_cases() {
        let s = plane_scene(2.0);
        let f = &s.frames[0];
        assert!(visible(&Point3::new(0.1, 0.0, 2.0), f, 0.05));
        assert_eq!(visibility(&Point3::new(0.1, 0.0, 3.0), f, 0.05), Visibility::Occluded);
        assert_eq!(visibility(&Point3::new(50.0, 0.0, 2.0), f, 0.05), Visibility::OutOfFrustum);
        assert_eq!(visibility(&Point3::new(0.0, 0.0, -2.0), f, 0.05), Visibility::BehindCamera);
    }

    #[test]
    fn two_plane_occlusion_matches_ray_test() {
        let mut spec = SceneSpec::plane(3.0, k100());
        spec.surfaces.push(Surface {
            primitive: Primitive::Plane {
                point: [-0.5, 0.0, 1.5],
                normal: [0.0, 0.0, -1.0],
                half_size: Some(0.5),
            },
            texture: None,
        });
        let scene = synth_scene(1, &spec).unwrap();
        let f = &scene.frames[0];
        let front = &spec.surfaces[1].primitive;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hidden = 0;
        for _ in 0..500 {
            let p = Point3::new(rng.random_range(-1.4..1.4), rng.random_range(-1.4..1.4), 3.0);
            let dir = p.coords / 3.0;
            // analytic: hidden iff the front square blocks the ray to p
            let blocked = front.intersect(&Point3::origin(), &dir).is_some_and(|t| t < 3.0);
            let pr = project(&p, &f.intrinsics, &f.pose);
            if f.pixel_of(pr.u, pr.v).is_none() {
                continue;
            }
            // skip rays grazing the square's edge, where the pixel grid decides
            let (a, b) = (p.x / 2.0, p.y / 2.0);
            if ((a + 0.5).abs() - 0.5).abs() < 0.03 || (b.abs() - 0.5).abs() < 0.03 {
                continue;
            }
            hidden += blocked as usize;
            assert_eq!(!visible(&p, f, 0.05), blocked, "{p:?}");
        }
        assert!(hidden > 20);
    }

    fn cloud_of(points: Vec<[f64; 3]>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points.into_iter().map(Point3::from).collect(), vec![[0.2, 0.4, 0.6]; n]).unwrap()
    }

    #[test]
    fn ball_exactly_n_points_kept_in_order() {
        let pts: Vec<[f64; 3]> = (0..16).map(|i| [0.01 * i as f64, 0.0, 0.0]).collect();
        let cloud = cloud_of(pts.clone());
        let grid = BallIndex::build(&cloud.points, 0.3).unwrap();
        let patch = extract_3d_patch(&cloud, &grid, &Point3::origin(), 0.3, 16, 1).unwrap().unwrap();
        for (i, p) in patch.points().iter().enumerate() {
            assert!((p[0] as f64 - pts[i][0] / 0.3).abs() < 1e-6);
            assert_eq!(&p[3..], &[0.2, 0.4, 0.6]);
        }
    }

    #[test]
    fn degenerate_ball_and_too_few() {
        let cloud = cloud_of(vec![[1.0, 1.0, 1.0]; 10]);
        let grid = BallIndex::build(&cloud.points, 0.3).unwrap();
        let patch = extract_3d_patch(&cloud, &grid, &Point3::new(1.0, 1.0, 1.0), 0.3, 4, 1).unwrap().unwrap();
        assert!(patch.points().iter().all(|p| p[..3] == [0.0, 0.0, 0.0]));
        let sparse = cloud_of(vec![[0.0; 3]; 7]);
        let g = BallIndex::build(&sparse.points, 0.3).unwrap();
        assert!(extract_3d_patch(&sparse, &g, &Point3::origin(), 0.3, 4, 1).unwrap().is_none());
    }

    #[test]
    fn subsampling_matches_seeded_oracle() {
        let n = 32;
        let pts: Vec<[f64; 3]> = (0..2 * n).map(|i| [0.001 * i as f64, 0.0, 0.0]).collect();
        let cloud = cloud_of(pts);
        let grid = BallIndex::build(&cloud.points, 0.3).unwrap();
        let patch = extract_3d_patch(&cloud, &grid, &Point3::origin(), 0.3, n, 42).unwrap().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut want = index::sample(&mut rng, 2 * n, n).into_vec();
        want.sort_unstable();
        let got: Vec<usize> = patch.points().iter().map(|p| (p[0] as f64 * 0.3 / 0.001).round() as usize).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ball_query_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pts: Vec<[f64; 3]> = (0..2000).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let cloud = cloud_of(pts);
        let grid = BallIndex::build(&cloud.points, 0.17).unwrap();
        for _ in 0..50 {
            let c = Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let r = rng.random_range(0.05..0.5);
            let want: Vec<usize> = (0..cloud.len()).filter(|&i| (cloud.points[i] - c).norm() <= r).collect();
            assert_eq!(grid.within(&cloud.points, &c, r), want);
        }
    }

    #[test]
    fn window_side_and_constant_patch() {
        let w = PatchWindow::DepthScaled { radius: 0.3 };
        assert!((w.side(100.0, 1.0) - 60.0).abs() < 1e-12);
        let img = ColorImage::constant(40, 30, [0.3, 0.6, 0.9]).unwrap();
        let p = extract_2d_patch(&img, 20.0, 15.0, 25.0, 64).unwrap().unwrap();
        assert!(p.data().iter().all(|&v| [0.3f32, 0.6, 0.9].contains(&v)));
        assert!(extract_2d_patch(&img, -30.0, 15.0, 25.0, 8).unwrap().is_none());
    }

    #[test]
    fn checkerboard_patch_matches_reference_sampler() {
        let img = ColorImage::from_fn(48, 48, |x, y| {
            let v = if (x / 4 + y / 4) % 2 == 0 { 0.9 } else { 0.1 };
            [v, 1.0 - v, 0.5]
        })
        .unwrap();
        let (u, v, side, size) = (23.3, 21.7, 17.0, 16);
        let patch = extract_2d_patch(&img, u, v, side, size).unwrap().unwrap();
        // independent bilinear reference with explicit edge clamping
        let at = |x: i64, y: i64, c: usize| img.get(x.clamp(0, 47) as usize, y.clamp(0, 47) as usize)[c] as f64;
        for i in 0..size {
            for j in 0..size {
                let sx = u - side / 2.0 + (j as f64 + 0.5) * side / size as f64;
                let sy = v - side / 2.0 + (i as f64 + 0.5) * side / size as f64;
                let (x0, y0) = (sx.floor() as i64, sy.floor() as i64);
                let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
                let got = patch.pixel(j, i);
                for c in 0..3 {
                    let want = (1.0 - ay) * ((1.0 - ax) * at(x0, y0, c) + ax * at(x0 + 1, y0, c))
                        + ay * ((1.0 - ax) * at(x0, y0 + 1, c) + ax * at(x0 + 1, y0 + 1, c));
                    assert!((got[c] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    fn small_cfg() -> CorrespondenceConfig {
        CorrespondenceConfig {
            num_points: 32,
            patch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn single_plane_point_gives_one_record() {
        let s = plane_scene(2.0);
        let cfg = CorrespondenceConfig {
            centers: Some(vec![[0.05, 0.0, 2.0]]),
            ..small_cfg()
        };
        let (recs, m) = generate_correspondences(&s, &cfg).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(m.records, 1);
        assert!(visible(&Point3::from(recs[0].center), &s.frames[0], 0.05));
    }

    #[test]
    fn outside_frustum_counted() {
        let s = plane_scene(2.0);
        let cfg = CorrespondenceConfig {
            centers: Some(vec![[0.0, 0.0, -2.0]]),
            ..small_cfg()
        };
        let mut cloud = s.cloud.clone();
        cloud.points.extend(vec![Point3::new(0.0, 0.0, -2.0); 10]);
        cloud.colors.extend(vec![[0.5; 3]; 10]);
        let s2 = Scene { cloud, ..s.clone() };
        let (recs, m) = generate_correspondences(&s2, &cfg).unwrap();
        assert!(recs.is_empty());
        assert_eq!(m.skipped.get("behind_camera"), Some(&1));
        let cfg = CorrespondenceConfig {
            centers: Some(vec![[40.0, 0.0, 2.0]]),
            ..small_cfg()
        };
        let mut cloud = s.cloud.clone();
        cloud.points.extend(vec![Point3::new(40.0, 0.0, 2.0); 10]);
        cloud.colors.extend(vec![[0.5; 3]; 10]);
        let (recs, m) = generate_correspondences(&Scene { cloud, ..s }, &cfg).unwrap();
        assert!(recs.is_empty());
        assert_eq!(m.skipped.get("out_of_frustum"), Some(&1));
    }

    #[test]
    fn identical_frames_double_records() {
        let mut s = plane_scene(2.0);
        let mut f = s.frames[0].clone();
        f.index = 1;
        s.frames.push(f);
        let cfg = CorrespondenceConfig {
            num_samples: 5,
            ..small_cfg()
        };
        let (recs, m) = generate_correspondences(&s, &cfg).unwrap();
        assert_eq!(recs.len(), 2 * m.points_with_records);
        for pair in recs.chunks(2) {
            assert_eq!((pair[0].point_id, pair[0].frame, pair[1].frame), (pair[1].point_id, 0, 1));
        }
    }

    #[test]
    fn records_are_self_consistent_and_deterministic() {
        let spec = SceneSpec::room(2, 4);
        let s = synth_scene(2, &spec).unwrap();
        let cfg = CorrespondenceConfig {
            num_samples: 40,
            seed: 4,
            ..small_cfg()
        };
        let (recs, _) = generate_correspondences(&s, &cfg).unwrap();
        assert!(!recs.is_empty());
        for r in &recs {
            assert!(visible(&Point3::from(r.center), &s.frames[r.frame], cfg.depth_tolerance));
            for p in r.points.points() {
                let n = ((p[0] * p[0] + p[1] * p[1] + p[2] * p[2]) as f64).sqrt();
                assert!(n <= 1.0 + 1e-6);
            }
        }
        let (again, _) = generate_correspondences(&s, &cfg).unwrap();
        assert_eq!(recs, again);
        let keys: Vec<(usize, usize)> = recs.iter().map(|r| (r.point_id, r.frame)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
