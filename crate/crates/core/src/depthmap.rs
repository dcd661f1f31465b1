//! Sparse-to-dense depth: grid-sampled image patches are decoded into local
//! point sets, anchored along their center rays with the sparse samples and
//! z-buffered back into a dense map.

use nalgebra::{Matrix3, Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{backproject, extract_3d_patch, patch_seed, BallIndex, CameraIntrinsics, PointCloud, DEFAULT_RADIUS};
use crate::descnet::{DualAutoEncoder, ImagePatch, PointPatch};
use crate::error::{Error, Result};
use crate::raster::{ColorImage, DepthMap};
use crate::retrieval::{grid_centers, grid_patches};

pub const DEFAULT_GRID: usize = 50;
pub const DEFAULT_SPARSE_COUNT: usize = 2048;
pub const DEFAULT_HOLE_RADIUS: usize = 5;
pub const MIN_IMAGE_SIDE: usize = 64;
const DECODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseSample {
    pub u: usize,
    pub v: usize,
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseDepth {
    pub samples: Vec<SparseSample>,
    pub intrinsics: CameraIntrinsics,
}

impl SparseDepth {
    pub fn new(samples: Vec<SparseSample>, intrinsics: CameraIntrinsics) -> Result<Self> {
        let s = Self { samples, intrinsics };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        for (i, s) in self.samples.iter().enumerate() {
            if !(s.depth > 0.0 && s.depth.is_finite()) {
                return Err(Error::InvalidArgument(format!("sparse sample {i} has depth {}", s.depth)));
            }
            if s.u >= self.intrinsics.width || s.v >= self.intrinsics.height {
                return Err(Error::InvalidArgument(format!(
                    "sparse sample {i} at ({}, {}) is outside the {}x{} image",
                    s.u, s.v, self.intrinsics.width, self.intrinsics.height
                )));
            }
        }
        Ok(())
    }

    pub fn mean_depth(&self) -> Option<f64> {
        (!self.samples.is_empty()).then(|| self.samples.iter().map(|s| s.depth).sum::<f64>() / self.samples.len() as f64)
    }
}

/// Up to `count` distinct valid pixels of `gt`, drawn uniformly.
pub fn sample_sparse(gt: &DepthMap, intrinsics: CameraIntrinsics, count: usize, seed: u64) -> Result<SparseDepth> {
    let valid: Vec<usize> = (0..gt.data().len()).filter(|&i| gt.data()[i] > 0.0).collect();
    if valid.is_empty() {
        return Err(Error::Empty("ground-truth depth has no valid pixel".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, valid.len(), count.min(valid.len()))
        .into_iter()
        .map(|i| valid[i])
        .collect();
    picked.sort_unstable();
    let w = gt.width();
    SparseDepth::new(
        picked
            .into_iter()
            .map(|i| SparseSample {
                u: i % w,
                v: i / w,
                depth: gt.data()[i],
            })
            .collect(),
        intrinsics,
    )
}

/// `rows × cols` patches on a regular lattice of cell centers, resampled
/// from `window`-pixel squares with edge replication.
pub fn patch_grid(image: &ColorImage, rows: usize, cols: usize, window: f64, size: usize) -> Result<Vec<([f64; 2], ImagePatch)>> {
    if image.width() < MIN_IMAGE_SIDE || image.height() < MIN_IMAGE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is below the {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE} minimum",
            image.width(),
            image.height()
        )));
    }
    grid_patches(image, rows, cols, window, size)
}

/// Local geometry of one grid patch in the normalized frame, oriented like
/// the camera.
pub enum PatchDecoder<'a> {
    /// 3D decoding of the 2D descriptor. `rotation` maps the model's local
    /// frame into the camera frame.
    Model {
        model: &'a DualAutoEncoder<f32>,
        rotation: Matrix3<f64>,
    },
    /// Ground-truth neighborhoods read from a dense depth map.
    Oracle { gt: &'a DepthMap, num_points: usize, seed: u64 },
}

/// `decode_3d(encode_2d(patch))`, batched.
pub fn decode_patch_clouds(model: &DualAutoEncoder<f32>, patches: &[ImagePatch]) -> Result<Vec<PointPatch>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(DECODE_CHUNK) {
        let d = model.encode_2d_batch(chunk)?;
        out.extend(model.decode_3d_batch(&d)?);
    }
    Ok(out)
}

/// Dense cloud of a depth map in the camera frame.
pub fn depth_cloud(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y);
            if d > 0.0 {
                points.push(Point3::from(k.ray(x as f64, y as f64) * d));
            }
        }
    }
    let colors = vec![[0.0; 3]; points.len()];
    PointCloud { points, colors }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    #[default]
    Offset,
    /// Also fits a positive scale of the local geometry when at least two
    /// interior samples constrain it.
    OffsetScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    pub rows: usize,
    pub cols: usize,
    pub radius: f64,
    /// Source window side in pixels; `None` scales a `2·radius` ball at the
    /// mean sparse depth.
    pub window: Option<f64>,
    pub fit: FitMode,
    pub hole_radius: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            rows: DEFAULT_GRID,
            cols: DEFAULT_GRID,
            radius: DEFAULT_RADIUS,
            window: None,
            fit: FitMode::Offset,
            hole_radius: DEFAULT_HOLE_RADIUS,
        }
    }
}

/// A decoded local cloud in the normalized frame, oriented like the
/// camera, and the pixel its center projects to.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalCloud {
    pub center: [f64; 2],
    pub points: Vec<Vector3<f64>>,
}

impl LocalCloud {
    /// Coordinates of `patch` rotated by `rotation`.
    pub fn from_patch(center: [f64; 2], patch: &PointPatch, rotation: &Matrix3<f64>) -> Self {
        let points = patch
            .points()
            .iter()
            .map(|q| rotation * Vector3::new(q[0] as f64, q[1] as f64, q[2] as f64))
            .collect();
        Self { center, points }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchFit {
    /// Depth of the patch center along its ray.
    pub depth: f64,
    pub scale: f64,
    /// Interior samples used; zero for neighbor-interpolated patches.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    #[serde(skip)]
    pub points: Vec<Point3<f64>>,
    pub fits: Vec<PatchFit>,
    pub fitted: usize,
    pub interpolated: usize,
}

/// Depth offset of the local surface at a lateral offset (meters): the
/// `z` of the local point nearest in `x, y`.
fn local_height(points: &[Vector3<f64>], radius: f64, dx: f64, dy: f64) -> f64 {
    let (qx, qy) = (dx / radius, dy / radius);
    let mut best = (f64::INFINITY, 0.0);
    for p in points {
        let d = (p.x - qx).powi(2) + (p.y - qy).powi(2);
        if d < best.0 {
            best = (d, p.z);
        }
    }
    best.1 * radius
}

fn fit_patch(local: &LocalCloud, sparse: &SparseDepth, half: f64, radius: f64, mode: FitMode) -> Option<PatchFit> {
    let k = &sparse.intrinsics;
    let [u, v] = local.center;
    let mut pairs = Vec::new();
    for s in &sparse.samples {
        let (du, dv) = (s.u as f64 - u, s.v as f64 - v);
        if du.abs() <= half && dv.abs() <= half {
            let h = local_height(&local.points, radius, du * s.depth / k.fx, dv * s.depth / k.fy);
            pairs.push((h, s.depth));
        }
    }
    if pairs.is_empty() {
        return None;
    }
    let n = pairs.len() as f64;
    let mh = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let md = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let offset = PatchFit {
        depth: md - mh,
        scale: 1.0,
        samples: pairs.len(),
    };
    if mode == FitMode::Offset || pairs.len() < 2 {
        return Some(offset);
    }
    let shh: f64 = pairs.iter().map(|p| (p.0 - mh).powi(2)).sum();
    let shd: f64 = pairs.iter().map(|p| (p.0 - mh) * (p.1 - md)).sum();
    if shh <= 1e-12 || shd <= 0.0 {
        return Some(offset);
    }
    let a = shd / shh;
    Some(PatchFit {
        depth: md - a * mh,
        scale: a,
        samples: pairs.len(),
    })
}

/// Anchors each local cloud along its center ray at the least-squares depth
/// of the sparse samples inside its `window`-pixel footprint. Patches
/// without samples take the inverse-distance-weighted fit of their four
/// nearest fitted patches.
pub fn assemble(locals: &[LocalCloud], sparse: &SparseDepth, radius: f64, window: f64, mode: FitMode) -> Result<Assembly> {
    sparse.validate()?;
    if sparse.samples.is_empty() {
        return Err(Error::Empty("no sparse depth samples".into()));
    }
    if !(radius > 0.0 && window > 0.0) {
        return Err(Error::InvalidArgument("radius and window must be positive".into()));
    }
    let fits: Vec<Option<PatchFit>> = locals
        .par_iter()
        .map(|l| fit_patch(l, sparse, window / 2.0, radius, mode))
        .collect();
    let anchored: Vec<usize> = (0..fits.len()).filter(|&i| fits[i].is_some()).collect();
    if anchored.is_empty() {
        return Err(Error::Degenerate("no patch footprint contains a sparse sample".into()));
    }
    let dist = |a: usize, b: usize| {
        let (p, q) = (locals[a].center, locals[b].center);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
    };
    let resolved: Vec<PatchFit> = (0..fits.len())
        .into_par_iter()
        .map(|i| {
            if let Some(f) = fits[i] {
                return f;
            }
            let mut near: Vec<(f64, usize)> = anchored.iter().map(|&j| (dist(i, j), j)).collect();
            near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            near.truncate(4);
            if let Some(&(d, j)) = near.first() {
                if d == 0.0 {
                    return PatchFit { samples: 0, ..fits[j].unwrap() };
                }
            }
            let (mut wsum, mut depth, mut scale) = (0.0, 0.0, 0.0);
            for &(d, j) in &near {
                let f = fits[j].unwrap();
                wsum += 1.0 / d;
                depth += f.depth / d;
                scale += f.scale / d;
            }
            PatchFit {
                depth: depth / wsum,
                scale: scale / wsum,
                samples: 0,
            }
        })
        .collect();
    let k = &sparse.intrinsics;
    let points = locals
        .iter()
        .zip(&resolved)
        .flat_map(|(l, f)| {
            let c = k.ray(l.center[0], l.center[1]) * f.depth;
            let s = radius * f.scale;
            l.points.iter().map(move |p| Point3::from(c + p * s))
        })
        .collect();
    Ok(Assembly {
        points,
        fitted: anchored.len(),
        interpolated: fits.len() - anchored.len(),
        fits: resolved,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionStats {
    pub projected: usize,
    pub filled: usize,
    pub invalid: usize,
}

/// Z-buffered projection of camera-frame points (nearest point per pixel),
/// then holes take the nearest projected pixel within `hole_radius`.
pub fn project_depth(points: &[Point3<f64>], k: &CameraIntrinsics, hole_radius: usize) -> Result<(DepthMap, ProjectionStats)> {
    k.validate()?;
    if points.is_empty() {
        return Err(Error::Empty("cloud to project".into()));
    }
    let (w, h) = (k.width, k.height);
    let mut z = vec![f64::INFINITY; w * h];
    for p in points {
        if !(p.z > 1e-6) {
            continue;
        }
        let x = (k.fx * p.x / p.z + k.cx).round();
        let y = (k.fy * p.y / p.z + k.cy).round();
        if x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64 {
            continue;
        }
        let i = y as usize * w + x as usize;
        if p.z < z[i] {
            z[i] = p.z;
        }
    }
    let r = hole_radius as isize;
    let mut offsets: Vec<(isize, isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dx * dx + dy * dy;
            if d2 > 0 && d2 <= r * r {
                offsets.push((d2, dy, dx));
            }
        }
    }
    offsets.sort_unstable();
    let mut out = vec![0.0; w * h];
    let mut stats = ProjectionStats {
        projected: 0,
        filled: 0,
        invalid: 0,
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            if z[i].is_finite() {
                out[i] = z[i];
                stats.projected += 1;
                continue;
            }
            let hit = offsets.iter().find_map(|&(_, dy, dx)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    return None;
                }
                let d = z[ny as usize * w + nx as usize];
                d.is_finite().then_some(d)
            });
            match hit {
                Some(d) => {
                    out[i] = d;
                    stats.filled += 1;
                }
                None => stats.invalid += 1,
            }
        }
    }
    Ok((DepthMap::new(w, h, out)?, stats))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixels: usize,
}

/// Metrics over pixels valid in both maps; `δᵢ` counts max-ratios below
/// `1.25ⁱ`.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<DepthMetrics> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(Error::shape(
            "depth_metrics",
            format!("{}x{} vs {}x{}", pred.width(), pred.height(), gt.width(), gt.height()),
        ));
    }
    let (mut rel, mut sq, mut d) = (0.0, 0.0, [0usize; 3]);
    let mut n = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !(p > 0.0 && g > 0.0) {
            continue;
        }
        n += 1;
        rel += (p - g).abs() / g;
        sq += (p - g) * (p - g);
        let ratio = (p / g).max(g / p);
        for (i, t) in [1.25f64, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
            if ratio < *t {
                d[i] += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("no pixel is valid in both depth maps".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rel: rel / nf,
        rmse: (sq / nf).sqrt(),
        delta1: d[0] as f64 / nf,
        delta2: d[1] as f64 / nf,
        delta3: d[2] as f64 / nf,
        pixels: n,
    })
}

/// The mean sparse depth at every pixel.
pub fn constant_baseline(sparse: &SparseDepth) -> Result<DepthMap> {
    let m = sparse.mean_depth().ok_or_else(|| Error::Empty("no sparse depth samples".into()))?;
    let k = &sparse.intrinsics;
    DepthMap::new(k.width, k.height, vec![m; k.width * k.height])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub patches: usize,
    pub fitted: usize,
    pub interpolated: usize,
    pub window: f64,
    pub projection: ProjectionStats,
}

/// Full pipeline: grid patches, local decoding, anchoring and projection.
pub fn predict_depth(
    image: &ColorImage,
    sparse: &SparseDepth,
    decoder: &PatchDecoder,
    cfg: &DepthConfig,
) -> Result<(DepthMap, DepthReport)> {
    sparse.validate()?;
    let k = sparse.intrinsics;
    if image.width() != k.width || image.height() != k.height {
        return Err(Error::shape(
            "predict_depth",
            format!("{}x{} image with {}x{} intrinsics", image.width(), image.height(), k.width, k.height),
        ));
    }
    let mean = sparse.mean_depth().ok_or_else(|| Error::Empty("no sparse depth samples".into()))?;
    let window = cfg.window.unwrap_or(2.0 * cfg.radius * k.fx / mean);
    let locals: Vec<LocalCloud> = match decoder {
        PatchDecoder::Model { model, rotation } => {
            let window = window.min(image.width().min(image.height()) as f64);
            let grid = patch_grid(image, cfg.rows, cfg.cols, window, model.config.patch_size)?;
            let patches: Vec<ImagePatch> = grid.iter().map(|(_, p)| p.clone()).collect();
            let clouds = decode_patch_clouds(model, &patches)?;
            grid.iter()
                .zip(clouds)
                .map(|((c, _), p)| LocalCloud::from_patch(*c, &p, rotation))
                .collect()
        }
        PatchDecoder::Oracle { gt, num_points, seed } => {
            if image.width() < MIN_IMAGE_SIDE || image.height() < MIN_IMAGE_SIDE {
                return Err(Error::InvalidArgument(format!("{}x{} image is below the minimum", image.width(), image.height())));
            }
            let cloud = depth_cloud(gt, &k);
            let index = BallIndex::build(&cloud.points, cfg.radius)?;
            let centers = grid_centers(k.width, k.height, cfg.rows, cfg.cols);
            let out: Vec<Option<LocalCloud>> = centers
                .par_iter()
                .enumerate()
                .map(|(i, &[u, v])| {
                    let (x, y) = (u.round() as usize, v.round() as usize);
                    let d = gt.get(x.min(k.width - 1), y.min(k.height - 1));
                    if d <= 0.0 {
                        return Ok(None);
                    }
                    let c = backproject(u, v, d, &k, &crate::datagen::Pose::identity());
                    Ok(extract_3d_patch(&cloud, &index, &c, cfg.radius, *num_points, patch_seed(*seed, i as u64))?
                        .map(|patch| LocalCloud::from_patch([u, v], &patch, &Matrix3::identity())))
                })
                .collect::<Result<_>>()?;
            out.into_iter().flatten().collect()
        }
    };
    if locals.is_empty() {
        return Err(Error::Degenerate("no grid patch produced a local cloud".into()));
    }
    let asm = assemble(&locals, sparse, cfg.radius, window, cfg.fit)?;
    let (map, projection) = project_depth(&asm.points, &k, cfg.hole_radius)?;
    Ok((
        map,
        DepthReport {
            patches: locals.len(),
            fitted: asm.fitted,
            interpolated: asm.interpolated,
            window,
            projection,
        },
    ))
}
