//! 2D-to-3D place recognition: k-means codebooks, VLAD aggregation of
//! grid-sampled descriptors, database search and recall@N.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{
    backproject, extract_3d_patch, patch_seed, synth_scene, voxel_key, BallIndex, CameraSpec, PointCloud, Pose,
    RgbdFrame, SceneModel, SceneSpec, DEFAULT_RADIUS,
};
use crate::descnet::{DualAutoEncoder, ImagePatch, PointPatch};
use crate::error::{Error, Result};
use crate::io::{Decoder, Encoder};
use crate::raster::ColorImage;

pub const DEFAULT_CODEBOOK_SIZE: usize = 64;
pub const DEFAULT_SUBMAP_VOXEL: f64 = 0.5;
pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_D_MAX: f64 = 0.5;
pub const DEFAULT_THETA_MAX_DEG: f64 = 30.0;
pub const INDEX_MAGIC: &[u8; 4] = b"LCDV";

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties to the lowest index.
fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub centroids: Vec<Vec<f64>>,
    pub seed: u64,
    pub iterations: usize,
    /// Centroids re-seeded after collapsing onto another centroid or losing
    /// every member.
    pub reseeded: Vec<usize>,
    /// Centroids still collapsed after re-seeding.
    pub collapsed: Vec<usize>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }
}

fn to_f64_rows<R: AsRef<[f32]>>(descs: &[R]) -> Result<Vec<Vec<f64>>> {
    let d = descs.first().map(|x| x.as_ref().len()).unwrap_or(0);
    if d == 0 {
        return Err(Error::Empty("descriptor set".into()));
    }
    descs
        .iter()
        .map(|x| {
            let x = x.as_ref();
            if x.len() != d {
                return Err(Error::shape("descriptor set", format!("length {} among length {d}", x.len())));
            }
            Ok(x.iter().map(|&v| v as f64).collect())
        })
        .collect()
}

/// Collapsed centroids: members of a duplicate group after the first, and
/// centroids without members.
fn collapsed_centroids(centroids: &[Vec<f64>], counts: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    for j in 0..centroids.len() {
        let dup = (0..j).any(|i| centroids[i] == centroids[j]);
        if dup || counts[j] == 0 {
            out.push(j);
        }
    }
    out
}

/// Seeded farthest-point initialization followed by Lloyd iterations until
/// the assignment stops changing or `max_iters` is reached.
pub fn kmeans_fit<R: AsRef<[f32]>>(descs: &[R], k: usize, seed: u64, max_iters: usize) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if descs.len() < k {
        return Err(Error::InvalidArgument(format!("k-means with k = {k} needs at least {k} descriptors, got {}", descs.len())));
    }
    let x = to_f64_rows(descs)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![x[rng.random_range(0..n)].clone()];
    let mut mind: Vec<f64> = x.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for i in 1..n {
            if mind[i] > mind[far] {
                far = i;
            }
        }
        centroids.push(x[far].clone());
        for (i, p) in x.iter().enumerate() {
            mind[i] = mind[i].min(sq_dist(p, &x[far]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    let mut reseeded = Vec::new();
    let mut iterations = 0;
    let mut reseed_done = false;
    loop {
        let mut changed = false;
        for (i, p) in x.iter().enumerate() {
            let j = nearest_centroid(p, &centroids);
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; x[0].len()]; k];
        for (i, p) in x.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let collapsed = collapsed_centroids(&centroids, &counts);
        if !collapsed.is_empty() && !reseed_done {
            reseed_done = true;
            // move each collapsed centroid onto the point worst served by its centroid
            let mut taken: BTreeSet<usize> = BTreeSet::new();
            for &j in &collapsed {
                let mut far = None;
                let mut far_d = -1.0;
                for (i, p) in x.iter().enumerate() {
                    let d = sq_dist(p, &centroids[assign[i]]);
                    if d > far_d && !taken.contains(&i) {
                        far = Some(i);
                        far_d = d;
                    }
                }
                if let Some(i) = far {
                    taken.insert(i);
                    centroids[j] = x[i].clone();
                    reseeded.push(j);
                }
            }
            assign.iter_mut().for_each(|a| *a = usize::MAX);
            iterations += 1;
            continue;
        }
        iterations += 1;
        if !changed || iterations >= max_iters {
            return Ok(Codebook {
                centroids,
                seed,
                iterations,
                reseeded,
                collapsed,
            });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VladVector {
    pub values: Vec<f64>,
    /// All residuals were zero; `values` is the zero vector.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VladOptions {
    pub signed_sqrt: bool,
}

/// Residual sums per nearest centroid (ties to the lowest index), then
/// optional signed square root, per-centroid normalization and global L2
/// normalization.
pub fn vlad_aggregate<R: AsRef<[f32]>>(descs: &[R], codebook: &Codebook, opts: VladOptions) -> Result<VladVector> {
    if descs.is_empty() {
        return Err(Error::Empty("VLAD of an empty descriptor set".into()));
    }
    let x = to_f64_rows(descs)?;
    let (k, d) = (codebook.k(), codebook.dim());
    if x[0].len() != d {
        return Err(Error::shape("vlad_aggregate", format!("descriptors of length {}, codebook D = {d}", x[0].len())));
    }
    let mut v = vec![0.0; k * d];
    for p in &x {
        let j = nearest_centroid(p, &codebook.centroids);
        for t in 0..d {
            v[j * d + t] += p[t] - codebook.centroids[j][t];
        }
    }
    if opts.signed_sqrt {
        v.iter_mut().for_each(|a| *a = a.signum() * a.abs().sqrt());
    }
    for block in v.chunks_mut(d) {
        let n = block.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            block.iter_mut().for_each(|a| *a /= n);
        }
    }
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if n == 0.0 {
        return Ok(VladVector { values: v, degenerate: true });
    }
    v.iter_mut().for_each(|a| *a /= n);
    Ok(VladVector { values: v, degenerate: false })
}

// ---------------------------------------------------------------------------
// Descriptor sampling

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub voxel: f64,
    pub radius: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Side in pixels of the square source window of each grid patch.
    pub window: f64,
    pub anchor: CellAnchor,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            voxel: DEFAULT_SUBMAP_VOXEL,
            radius: DEFAULT_RADIUS,
            grid_rows: DEFAULT_GRID,
            grid_cols: DEFAULT_GRID,
            window: 64.0,
            anchor: CellAnchor::NearestPoint,
            seed: 0,
        }
    }
}

/// Centers of a `rows × cols` grid of equal cells over the image, with
/// pixel centers on integer coordinates.
pub fn grid_centers(width: usize, height: usize, rows: usize, cols: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push([
                (c as f64 + 0.5) * width as f64 / cols as f64 - 0.5,
                (r as f64 + 0.5) * height as f64 / rows as f64 - 0.5,
            ]);
        }
    }
    out
}

/// `size × size` patches resampled from `window`-pixel squares around each
/// grid center; pixels beyond the border replicate the edge.
pub fn grid_patches(image: &ColorImage, rows: usize, cols: usize, window: f64, size: usize) -> Result<Vec<([f64; 2], ImagePatch)>> {
    if rows == 0 || cols == 0 || size == 0 || !(window > 0.0) {
        return Err(Error::InvalidArgument("grid and patch extents must be positive".into()));
    }
    if (image.width() as f64) < window || (image.height() as f64) < window {
        return Err(Error::InvalidArgument(format!(
            "{}x{} image is smaller than one {window}-pixel patch",
            image.width(),
            image.height()
        )));
    }
    let step = window / size as f64;
    grid_centers(image.width(), image.height(), rows, cols)
        .into_iter()
        .map(|[u, v]| {
            let (x0, y0) = (u - window / 2.0, v - window / 2.0);
            let p = ImagePatch::from_fn(size, |j, i| {
                image.sample_bilinear(x0 + (j as f64 + 0.5) * step, y0 + (i as f64 + 0.5) * step)
            })?;
            Ok(([u, v], p))
        })
        .collect()
}

fn cell_center(key: [i64; 3], voxel: f64) -> Point3<f64> {
    Point3::new(
        (key[0] as f64 + 0.5) * voxel,
        (key[1] as f64 + 0.5) * voxel,
        (key[2] as f64 + 0.5) * voxel,
    )
}

/// Where a cell's patch is centered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAnchor {
    /// The geometric center of the voxel.
    Center,
    /// The cloud point of the cell nearest its center, so patches sit on the
    /// surface like training patches do.
    #[default]
    NearestPoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubmapCell {
    /// Geometric center of the voxel.
    pub center: Point3<f64>,
    pub anchor: Point3<f64>,
    pub patch: PointPatch,
}

/// One patch per occupied voxel; cells whose ball holds too few points are
/// skipped.
pub fn submap_cells(cloud: &PointCloud, cfg: &SamplingConfig, num_points: usize) -> Result<Vec<SubmapCell>> {
    if cloud.is_empty() {
        return Err(Error::Empty("submap cloud".into()));
    }
    if !(cfg.voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {} must be positive", cfg.voxel)));
    }
    // nearest point to each cell center, ties to the lowest index
    let mut cells: BTreeMap<[i64; 3], (f64, usize)> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let key = voxel_key(p, cfg.voxel);
        let d = (p - cell_center(key, cfg.voxel)).norm_squared();
        let e = cells.entry(key).or_insert((d, i));
        if d < e.0 {
            *e = (d, i);
        }
    }
    let index = BallIndex::build(&cloud.points, cfg.radius)?;
    let mut out = Vec::new();
    for (n, (key, &(_, nearest))) in cells.iter().enumerate() {
        let center = cell_center(*key, cfg.voxel);
        let anchor = match cfg.anchor {
            CellAnchor::Center => center,
            CellAnchor::NearestPoint => cloud.points[nearest],
        };
        if let Some(patch) = extract_3d_patch(cloud, &index, &anchor, cfg.radius, num_points, patch_seed(cfg.seed, n as u64))? {
            out.push(SubmapCell { center, anchor, patch });
        }
    }
    if out.is_empty() {
        return Err(Error::Degenerate(format!(
            "no voxel of {} occupied cells holds enough points for a patch",
            cells.len()
        )));
    }
    Ok(out)
}

/// Maps patches to descriptors. The oracle variant ignores appearance and
/// embeds the voxel cell seen by the patch, so 2D and 3D descriptors agree
/// exactly wherever the geometry agrees.

pub enum PlaceEncoder<'a> {
    Model(&'a DualAutoEncoder<f32>),
    /// `cloud_voxel` thins query clouds to the submaps' point density.
    Oracle { embedding: PositionEmbedding, cloud_voxel: f64 },
}

/// Random Fourier features of a world position.
#[derive(Clone, Debug)]
pub struct PositionEmbedding {
    freqs: Vec<Vector3<f64>>,
    phases: Vec<f64>,
}

impl PositionEmbedding {
    /// `dim` features with spatial frequencies of scale `1 / length`.
    pub fn new(dim: usize, length: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / length).expect("positive scale");
        let freqs = (0..dim)
            .map(|_| Vector3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)))
            .collect();
        let phases = (0..dim).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        Self { freqs, phases }
    }

    pub fn embed(&self, p: &Point3<f64>) -> Vec<f32> {
        self.freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| (w.dot(&p.coords) + b).cos() as f32)
            .collect()
    }
}

/// Gaussian pixel noise, clamped back to [0, 1].
pub fn add_patch_noise(patch: &ImagePatch, sigma: f64, rng: &mut impl Rng) -> Result<ImagePatch> {
    if sigma == 0.0 {
        return Ok(patch.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let data = patch
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    ImagePatch::new(patch.size(), data)
}

pub fn submap_descriptors(cloud: &PointCloud, cfg: &SamplingConfig, enc: &PlaceEncoder) -> Result<Vec<Vec<f32>>> {
    match enc {
        PlaceEncoder::Model(m) => {
            let cells = submap_cells(cloud, cfg, m.config.num_points)?;
            let patches: Vec<PointPatch> = cells.into_iter().map(|c| c.patch).collect();
            Ok(m.encode_3d_batch(&patches)?.into_iter().map(|d| d.values).collect())
        }
        PlaceEncoder::Oracle { embedding: e, .. } => Ok(submap_cells(cloud, cfg, crate::datagen::MIN_PATCH_POINTS)?
            .iter()
            .map(|c| e.embed(&c.center))
            .collect()),
    }
}

/// Grid descriptors of a query frame. The oracle instead samples voxel
/// cells of the frame's ground-truth depth, exactly as for a submap.
pub fn image_descriptors(
    frame: &RgbdFrame,
    cfg: &SamplingConfig,
    enc: &PlaceEncoder,
    noise: Option<(f64, u64)>,
) -> Result<Vec<Vec<f32>>> {
    match enc {
        PlaceEncoder::Model(m) => {
            let grid = grid_patches(&frame.color, cfg.grid_rows, cfg.grid_cols, cfg.window, m.config.patch_size)?;
            let mut patches: Vec<ImagePatch> = grid.into_iter().map(|(_, p)| p).collect();
            if let Some((sigma, seed)) = noise {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                patches = patches.iter().map(|p| add_patch_noise(p, sigma, &mut rng)).collect::<Result<_>>()?;
            }
            Ok(m.encode_2d_batch(&patches)?.into_iter().map(|d| d.values).collect())
        }
        PlaceEncoder::Oracle { embedding: e, cloud_voxel } => {
            let cloud = thin(&frame_cloud(frame), *cloud_voxel);
            if cloud.is_empty() {
                return Err(Error::Degenerate(format!("frame {} has no valid depth", frame.index)));
            }
            Ok(submap_cells(&cloud, cfg, crate::datagen::MIN_PATCH_POINTS)?
                .iter()
                .map(|c| e.embed(&c.center))
                .collect())
        }
    }
}

/// World-frame cloud of every pixel with depth.
pub fn frame_cloud(frame: &RgbdFrame) -> PointCloud {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for y in 0..frame.depth.height() {
        for x in 0..frame.depth.width() {
            let d = frame.depth.get(x, y);
            if d > 0.0 {
                points.push(backproject(x as f64, y as f64, d, &frame.intrinsics, &frame.pose));
                colors.push(frame.color.get(x, y));
            }
        }
    }
    PointCloud { points, colors }
}

/// First point of each occupied `voxel` cell.
fn thin(cloud: &PointCloud, voxel: f64) -> PointCloud {
    let mut seen = std::collections::HashSet::new();
    let keep: Vec<usize> = (0..cloud.len()).filter(|&i| seen.insert(voxel_key(&cloud.points[i], voxel))).collect();
    cloud.subset(&keep)
}

// ---------------------------------------------------------------------------
// Database

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceEntry {
    pub id: u64,
    pub vlad: VladVector,
    /// Camera-from-world pose of the submap's anchor frame.
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: u64,
    pub distance: f64,
}

/// Top `n` entries by ascending Euclidean distance, ties by id.
pub fn query(db: &[PlaceEntry], q: &VladVector, n: usize) -> Result<Vec<Ranked>> {
    if db.is_empty() {
        return Err(Error::Empty("place database".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut all: Vec<Ranked> = db
        .iter()
        .map(|e| {
            if e.vlad.values.len() != q.values.len() {
                return Err(Error::shape("query", format!("{} vs {} VLAD values", q.values.len(), e.vlad.values.len())));
            }
            Ok(Ranked {
                id: e.id,
                distance: sq_dist(&e.vlad.values, &q.values).sqrt(),
            })
        })
        .collect::<Result<_>>()?;
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.id.cmp(&b.id)));
    all.truncate(n);
    Ok(all)
}

/// Database with its codebook, as stored in an index file.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaceIndex {
    pub codebook: Codebook,
    pub options: VladOptions,
    pub entries: Vec<PlaceEntry>,
}

impl PlaceIndex {
    /// Layout: magic, version, k `u32`, D `u32`, signed-sqrt flag `u8`,
    /// codebook `k·D` f64, entry count `u64`, then per entry id `u64`,
    /// rotation (row-major) and translation as 12 f64, degenerate flag `u8`
    /// and `k·D` f64 VLAD values.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::header(INDEX_MAGIC);
        let (k, d) = (self.codebook.k(), self.codebook.dim());
        e.u32(k as u32);
        e.u32(d as u32);
        e.u8(self.options.signed_sqrt as u8);
        self.codebook.centroids.iter().flatten().for_each(|&v| e.f64(v));
        e.u64(self.entries.len() as u64);
        for en in &self.entries {
            e.u64(en.id);
            let m = en.pose.to_matrix4();
            for row in &m[..3] {
                row.iter().for_each(|&v| e.f64(v));
            }
            e.u8(en.vlad.degenerate as u8);
            en.vlad.values.iter().for_each(|&v| e.f64(v));
        }
        e.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, INDEX_MAGIC, "place index")?;
        let k = d.u32()? as usize;
        let dim = d.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(Error::Format("place index: empty codebook".into()));
        }
        let options = VladOptions {
            signed_sqrt: d.u8()? != 0,
        };
        let centroids = (0..k)
            .map(|_| (0..dim).map(|_| d.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let count = d.u64()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = d.u64()?;
            let mut m = [[0.0; 4]; 4];
            for row in m.iter_mut().take(3) {
                for v in row.iter_mut() {
                    *v = d.f64()?;
                }
            }
            m[3][3] = 1.0;
            let pose = Pose::from_matrix4(&m)?;
            let degenerate = d.u8()? != 0;
            let values = (0..k * dim).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
            entries.push(PlaceEntry {
                id,
                vlad: VladVector { values, degenerate },
                pose,
            });
        }
        d.finish()?;
        Ok(Self {
            codebook: Codebook {
                centroids,
                seed: 0,
                iterations: 0,
                reseeded: Vec::new(),
                collapsed: Vec::new(),
            },
            options,
            entries,
        })
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// True when the camera centers are within `d_max` meters and the
/// rotations within `theta_max_deg` degrees, both inclusive.
pub fn pose_matches(a: &Pose, b: &Pose, d_max: f64, theta_max_deg: f64) -> bool {
    (a.center() - b.center()).norm() <= d_max && a.rotation_angle_deg(b) <= theta_max_deg
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCurve {
    pub n: Vec<usize>,
    pub recall: Vec<f64>,
    pub evaluated: usize,
    /// Queries without a ground-truth pose.
    pub excluded: usize,
}

/// Recall@N for each requested `N`: the fraction of queries with a
/// pose-matching submap among their first `N` results.
pub fn recall_at_n(
    results: &[Vec<Ranked>],
    query_poses: &[Option<Pose>],
    submap_poses: &BTreeMap<u64, Pose>,
    d_max: f64,
    theta_max_deg: f64,
    ns: &[usize],
) -> Result<RecallCurve> {
    if results.len() != query_poses.len() {
        return Err(Error::shape("recall_at_n", format!("{} result lists vs {} poses", results.len(), query_poses.len())));
    }
    // rank of the first correct result per query
    let mut first_hit = Vec::new();
    let mut excluded = 0;
    for (res, pose) in results.iter().zip(query_poses) {
        let Some(q) = pose else {
            excluded += 1;
            continue;
        };
        let mut hit = None;
        for (r, item) in res.iter().enumerate() {
            let p = submap_poses
                .get(&item.id)
                .ok_or_else(|| Error::InvalidArgument(format!("submap {} has no pose", item.id)))?;
            if pose_matches(q, p, d_max, theta_max_deg) {
                hit = Some(r + 1);
                break;
            }
        }
        first_hit.push(hit);
    }
    let evaluated = first_hit.len();
    let recall = ns
        .iter()
        .map(|&n| {
            if evaluated == 0 {
                0.0
            } else {
                first_hit.iter().filter(|h| h.is_some_and(|r| r <= n)).count() as f64 / evaluated as f64
            }
        })
        .collect();
    Ok(RecallCurve {
        n: ns.to_vec(),
        recall,
        evaluated,
        excluded,
    })
}

// ---------------------------------------------------------------------------
// Synthetic place-recognition benchmark

/// Submaps fused from short runs of frames on a circular trajectory, and
/// query frames rendered near each submap's anchor.
#[derive(Clone, Debug)]
pub struct PlaceBenchmark {
    pub submaps: Vec<PointCloud>,
    pub anchors: Vec<Pose>,
    pub queries: Vec<RgbdFrame>,
    pub query_truth: Vec<usize>,
}

/// Keeps the room's walls off the voxel lattice so cell occupancy does not
/// hinge on rounding.
pub const ROOM_SHIFT: [f64; 3] = [0.137, 0.211, 0.073];

pub(crate) fn ring_pose(angle: f64, radius: f64, height: f64, jitter: f64) -> CameraSpec {
    let (c, s) = (angle.cos(), angle.sin());
    let [x, y, z] = ROOM_SHIFT;
    CameraSpec::LookAt {
        eye: [radius * c + x, radius * s + y, height + z],
        target: [-0.9 * c + jitter * (-s) + x, -0.9 * s + jitter * c + y, 0.5 + z],
        up: [0.0, 0.0, 1.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlaceBenchmarkConfig {
    pub submaps: usize,
    pub frames_per_submap: usize,
    /// Angular step between frames of one submap, degrees.
    pub frame_step_deg: f64,
    /// Angular offset of each query from its submap anchor, degrees.
    pub query_offset_deg: f64,
    /// Height change of each query camera, meters.
    pub query_lift: f64,
    /// Sideways shift of each query's look-at target, meters.
    pub query_jitter: f64,
    pub cloud_voxel: f64,
}

impl Default for PlaceBenchmarkConfig {
    fn default() -> Self {
        Self {
            submaps: 24,
            frames_per_submap: 3,
            frame_step_deg: 3.0,
            query_offset_deg: 1.5,
            query_lift: -0.02,
            query_jitter: 0.05,
            cloud_voxel: 0.03,
        }
    }
}

pub fn synthetic_places(seed: u64, cfg: &PlaceBenchmarkConfig) -> Result<PlaceBenchmark> {
    if cfg.submaps == 0 || cfg.frames_per_submap == 0 {
        return Err(Error::InvalidArgument("submaps and frames_per_submap must be positive".into()));
    }
    let mut spec = SceneSpec::room(seed, 1);
    spec.translate(ROOM_SHIFT);
    let tau = std::f64::consts::TAU;
    let mut submaps = Vec::new();
    let mut anchors = Vec::new();
    let mut queries = Vec::new();
    let mut query_truth = Vec::new();
    let model = SceneModel::new(&spec, seed)?;
    for s in 0..cfg.submaps {
        let base = tau * s as f64 / cfg.submaps as f64;
        let half = (cfg.frames_per_submap as f64 - 1.0) / 2.0;
        spec.cameras = (0..cfg.frames_per_submap)
            .map(|f| ring_pose(base + (f as f64 - half) * cfg.frame_step_deg.to_radians(), 2.0, 1.4, 0.0))
            .collect();
        spec.cloud_voxel = cfg.cloud_voxel;
        spec.name = format!("submap-{s}");
        let scene = synth_scene(seed, &spec)?;
        anchors.push(ring_pose(base, 2.0, 1.4, 0.0).pose()?);
        submaps.push(scene.cloud);
        let qpose = ring_pose(base + cfg.query_offset_deg.to_radians(), 2.0, 1.4 + cfg.query_lift, cfg.query_jitter).pose()?;
        let (color, depth) = model.render(&spec.intrinsics, &qpose)?;
        queries.push(RgbdFrame::new(s, color, depth, spec.intrinsics, qpose)?);
        query_truth.push(s);
    }
    Ok(PlaceBenchmark {
        submaps,
        anchors,
        queries,
        query_truth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceRunReport {
    pub curve: RecallCurve,
    pub results: Vec<Vec<Ranked>>,
    pub codebook_reseeded: usize,
    pub codebook_collapsed: usize,
}

/// Database of `(id, cloud, anchor pose)` submaps with a codebook fitted
/// on all their descriptors; `k` is capped by the descriptor count.
pub fn build_index(
    submaps: &[(u64, &PointCloud, Pose)],
    enc: &PlaceEncoder,
    sampling: &SamplingConfig,
    k: usize,
    opts: VladOptions,
) -> Result<PlaceIndex> {
    let per_submap: Vec<Vec<Vec<f32>>> = submaps
        .iter()
        .map(|(_, c, _)| submap_descriptors(c, sampling, enc))
        .collect::<Result<_>>()?;
    let all: Vec<&Vec<f32>> = per_submap.iter().flatten().collect();
    let k = k.min(all.len());
    let codebook = kmeans_fit(&all, k, sampling.seed, 100)?;
    let entries = per_submap
        .iter()
        .zip(submaps)
        .map(|(d, (id, _, pose))| {
            Ok(PlaceEntry {
                id: *id,
                vlad: vlad_aggregate(d, &codebook, opts)?,
                pose: *pose,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PlaceIndex {
        codebook,
        options: opts,
        entries,
    })
}

/// Top `n` submaps for one query frame.
pub fn query_frame(
    index: &PlaceIndex,
    frame: &RgbdFrame,
    enc: &PlaceEncoder,
    sampling: &SamplingConfig,
    noise: Option<(f64, u64)>,
    n: usize,
) -> Result<Vec<Ranked>> {
    let d = image_descriptors(frame, sampling, enc, noise)?;
    let v = vlad_aggregate(&d, &index.codebook, index.options)?;
    query(&index.entries, &v, n)
}

/// Builds the database from the submaps, queries with every frame and
/// scores recall@1..=`max_n`.
pub fn run_place_benchmark(
    bench: &PlaceBenchmark,
    enc: &PlaceEncoder,
    sampling: &SamplingConfig,
    k: usize,
    opts: VladOptions,
    noise: Option<(f64, u64)>,
    max_n: usize,
) -> Result<(PlaceIndex, PlaceRunReport)> {
    let submaps: Vec<(u64, &PointCloud, Pose)> = bench
        .submaps
        .iter()
        .zip(&bench.anchors)
        .enumerate()
        .map(|(i, (c, p))| (i as u64, c, *p))
        .collect();
    let index = build_index(&submaps, enc, sampling, k, opts)?;
    let mut results = Vec::new();
    for (qi, q) in bench.queries.iter().enumerate() {
        let qn = noise.map(|(s, seed)| (s, patch_seed(seed, qi as u64)));
        results.push(query_frame(&index, q, enc, sampling, qn, max_n)?);
    }
    let (codebook, entries) = (index.codebook, index.entries);
    let poses: BTreeMap<u64, Pose> = entries.iter().map(|e| (e.id, e.pose)).collect();
    let qposes: Vec<Option<Pose>> = bench.queries.iter().map(|q| Some(q.pose)).collect();
    let ns: Vec<usize> = (1..=max_n).collect();
    let curve = recall_at_n(&results, &qposes, &poses, DEFAULT_D_MAX, DEFAULT_THETA_MAX_DEG, &ns)?;
    let report = PlaceRunReport {
        curve,
        results,
        codebook_reseeded: codebook.reseeded.len(),
        codebook_collapsed: codebook.collapsed.len(),
    };
    Ok((PlaceIndex { codebook, options: opts, entries }, report))
}
