//! Descriptor matching, rigid registration with RANSAC, and the image
//! matching and registration benchmarks.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{extract_3d_patch, patch_seed, voxel_key, BallIndex, PointCloud, Pose};
use crate::descnet::{euclidean, Descriptor, DualAutoEncoder, PointPatch};
use crate::error::{Error, Result};

/// Rigid motion `x ↦ R x + t`.
pub type RigidTransform = Pose;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

/// Nearest element of `b` for every element of `a` by exhaustive scan,
/// ties to the lowest index.
pub fn match_nn<R: AsRef<[f32]> + Sync>(a: &[R], b: &[R]) -> Result<Vec<Match>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("match_nn needs two non-empty descriptor sets".into()));
    }
    let d = a[0].as_ref().len();
    if let Some(bad) = a.iter().chain(b).find(|x| x.as_ref().len() != d) {
        return Err(Error::shape(
            "match_nn",
            format!("descriptor of length {} among length {d}", bad.as_ref().len()),
        ));
    }
    Ok(a.par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut best = Match {
                index_a: i,
                index_b: 0,
                distance: f64::INFINITY,
            };
            for (j, c) in b.iter().enumerate() {
                let dist = euclidean(q.as_ref(), c.as_ref());
                if dist < best.distance {
                    best.index_b = j;
                    best.distance = dist;
                }
            }
            best
        })
        .collect())
}

pub const DEFAULT_PIXEL_TOLERANCE: f64 = 4.0;

/// True matches over predicted matches. A match is true when keypoint
/// `index_b` lies within `tolerance` pixels (inclusive) of the ground-truth
/// location of keypoint `index_a` in image B; keypoints without ground truth
/// count as false. `None` when there are no matches.
pub fn matching_precision(
    matches: &[Match],
    keypoints_b: &[[f64; 2]],
    truth_in_b: &[Option<[f64; 2]>],
    tolerance: f64,
) -> Result<Option<f64>> {
    if matches.is_empty() {
        return Ok(None);
    }
    let mut hits = 0;
    for m in matches {
        let kb = keypoints_b
            .get(m.index_b)
            .ok_or_else(|| Error::InvalidArgument(format!("match target {} out of range", m.index_b)))?;
        let gt = truth_in_b
            .get(m.index_a)
            .ok_or_else(|| Error::InvalidArgument(format!("match source {} out of range", m.index_a)))?;
        if let Some(g) = gt {
            if (kb[0] - g[0]).hypot(kb[1] - g[1]) <= tolerance {
                hits += 1;
            }
        }
    }
    Ok(Some(hits as f64 / matches.len() as f64))
}

pub const DEFAULT_KEYPOINT_VOXEL: f64 = 0.10;

/// One keypoint per occupied voxel: the point nearest the voxel centroid,
/// ties to the lowest index. Returned indices are ascending.
pub fn downsample_keypoints(points: &[Point3<f64>], voxel: f64) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::Empty("keypoint downsampling of an empty cloud".into()));
    }
    if !(voxel > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size {voxel} must be positive")));
    }
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        cells.entry(voxel_key(p, voxel)).or_default().push(i);
    }
    let mut out: Vec<usize> = cells
        .values()
        .map(|ids| {
            let c = ids.iter().fold(Vector3::zeros(), |acc, &i| acc + points[i].coords) / ids.len() as f64;
            let mut best = (ids[0], f64::INFINITY);
            for &i in ids {
                let d = (points[i].coords - c).norm_squared();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Least-squares rigid transform taking `src` onto `dst`, reflection
/// corrected.
pub fn kabsch_fit(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::shape("kabsch_fit", format!("{} vs {} points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::InvalidArgument(format!("kabsch_fit needs 3 pairs, got {}", src.len())));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let cd = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s.coords - cs) * (d.coords - cd).transpose();
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-12 * sv[0].max(1e-300)) || sv[0] < 1e-24 {
        return Err(Error::Degenerate(format!(
            "kabsch_fit: collinear or coincident points (singular values {:.3e}, {:.3e}, {:.3e})",
            sv[0], sv[1], sv[2]
        )));
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let r = v * fix * u.transpose();
    let t = cd - r * cs;
    Pose::new(r, t).map_err(|_| Error::Numerical("kabsch_fit produced a non-rotation".into()))
}

pub fn transform_error_deg_m(a: &RigidTransform, b: &RigidTransform) -> (f64, f64) {
    (a.rotation_angle_deg(b), (a.translation - b.translation).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            inlier_threshold: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacFit {
    pub transform: RigidTransform,
    /// Inlier matches of the best hypothesis, in canonical order.
    pub inliers: Vec<Match>,
    pub inlier_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RansacOutcome {
    Success(RansacFit),
    /// No hypothesis gathered three inliers.
    Failed { best_inliers: usize },
}

impl RansacOutcome {
    pub fn transform(&self) -> Option<&RigidTransform> {
        match self {
            RansacOutcome::Success(f) => Some(&f.transform),
            RansacOutcome::Failed { .. } => None,
        }
    }
}

fn inliers_of(t: &RigidTransform, src: &[Point3<f64>], dst: &[Point3<f64>], thr: f64) -> (Vec<usize>, f64) {
    let mut idx = Vec::new();
    let mut sq = 0.0;
    for (i, (s, d)) in src.iter().zip(dst).enumerate() {
        let e = (t.transform(s) - d).norm_squared();
        if e < thr * thr {
            idx.push(i);
            sq += e;
        }
    }
    let rmse = if idx.is_empty() { f64::INFINITY } else { (sq / idx.len() as f64).sqrt() };
    (idx, rmse)
}

/// Three-point RANSAC over matched keypoints. Matches are put in canonical
/// order first and hypothesis `h` samples with its own seed, so the result
/// depends neither on the input order nor on scheduling. The best hypothesis
/// (most inliers, then lower inlier RMSE, then lower `h`) is refit on its
/// inliers.
pub fn ransac_register(
    src_kps: &[Point3<f64>],
    dst_kps: &[Point3<f64>],
    matches: &[Match],
    cfg: &RansacConfig,
) -> Result<RansacOutcome> {
    if matches.len() < 3 {
        return Err(Error::InvalidArgument(format!("ransac_register needs 3 matches, got {}", matches.len())));
    }
    if cfg.iterations == 0 || !(cfg.inlier_threshold > 0.0) {
        return Err(Error::InvalidArgument("iterations and inlier_threshold must be positive".into()));
    }
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| {
        (a.index_a, a.index_b)
            .cmp(&(b.index_a, b.index_b))
            .then(a.distance.total_cmp(&b.distance))
    });
    let get = |pts: &[Point3<f64>], i: usize| {
        pts.get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("keypoint index {i} out of range")))
    };
    let src: Vec<Point3<f64>> = sorted.iter().map(|m| get(src_kps, m.index_a)).collect::<Result<_>>()?;
    let dst: Vec<Point3<f64>> = sorted.iter().map(|m| get(dst_kps, m.index_b)).collect::<Result<_>>()?;
    let m = sorted.len();
    let thr = cfg.inlier_threshold;
    let best = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|h| {
            let mut rng = ChaCha8Rng::seed_from_u64(patch_seed(cfg.seed, h as u64));
            let s = index::sample(&mut rng, m, 3);
            let ps: Vec<_> = s.iter().map(|i| src[i]).collect();
            let qs: Vec<_> = s.iter().map(|i| dst[i]).collect();
            let t = kabsch_fit(&ps, &qs).ok()?;
            let (idx, rmse) = inliers_of(&t, &src, &dst, thr);
            Some((idx.len(), rmse, h))
        })
        .reduce_with(|a, b| {
            let better_b = b.0 > a.0 || (b.0 == a.0 && (b.1 < a.1 || (b.1 == a.1 && b.2 < a.2)));
            if better_b {
                b
            } else {
                a
            }
        });
    let Some((count, _, h)) = best.filter(|b| b.0 >= 3) else {
        return Ok(RansacOutcome::Failed {
            best_inliers: best.map_or(0, |b| b.0),
        });
    };
    debug_assert!(count >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed(cfg.seed, h as u64));
    let s = index::sample(&mut rng, m, 3);
    let hyp = kabsch_fit(
        &s.iter().map(|i| src[i]).collect::<Vec<_>>(),
        &s.iter().map(|i| dst[i]).collect::<Vec<_>>(),
    )?;
    let (idx, _) = inliers_of(&hyp, &src, &dst, thr);
    let refined = kabsch_fit(
        &idx.iter().map(|&i| src[i]).collect::<Vec<_>>(),
        &idx.iter().map(|&i| dst[i]).collect::<Vec<_>>(),
    )
    .unwrap_or(hyp);
    let sq: f64 = idx.iter().map(|&i| (refined.transform(&src[i]) - dst[i]).norm_squared()).sum();
    Ok(RansacOutcome::Success(RansacFit {
        transform: refined,
        inliers: idx.iter().map(|&i| sorted[i]).collect(),
        inlier_rmse: (sq / idx.len() as f64).sqrt(),
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationEval {
    pub tau: f64,
    pub overlap_threshold: f64,
    /// Neighbor radius of the overlap coverage test.
    pub overlap_radius: f64,
}

impl Default for RegistrationEval {
    fn default() -> Self {
        Self {
            tau: 0.2,
            overlap_threshold: 0.30,
            overlap_radius: 0.05,
        }
    }
}

impl RegistrationEval {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) || !(self.overlap_radius > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid registration criteria {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    pub rmse: f64,
    pub overlap: f64,
}

/// Root mean square of `‖T p − q‖` over ground-truth pairs.
pub fn correspondence_rmse(t: &RigidTransform, pairs: &[(Point3<f64>, Point3<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("ground-truth correspondence set".into()));
    }
    let s: f64 = pairs.iter().map(|(p, q)| (t.transform(p) - q).norm_squared()).sum();
    Ok((s / pairs.len() as f64).sqrt())
}

/// Fraction of `T · src` with a `dst` neighbor within `radius`.
pub fn overlap_ratio(t: &RigidTransform, src: &[Point3<f64>], dst: &[Point3<f64>], dst_index: &BallIndex, radius: f64) -> f64 {
    if src.is_empty() {
        return 0.0;
    }
    let hits = src
        .par_iter()
        .filter(|p| dst_index.nearest_within(dst, &t.transform(p), radius).is_some())
        .count();
    hits as f64 / src.len() as f64
}

/// Correct iff `rmse² < τ²` (strict) and the overlap of `T · src` with
/// `dst` reaches the threshold.
pub fn registration_correct(
    t: &RigidTransform,
    eval: &RegistrationEval,
    gt_pairs: &[(Point3<f64>, Point3<f64>)],
    src: &[Point3<f64>],
    dst: &[Point3<f64>],
) -> Result<Verdict> {
    eval.validate()?;
    let rmse = correspondence_rmse(t, gt_pairs)?;
    let sq: f64 = gt_pairs.iter().map(|(p, q)| (t.transform(p) - q).norm_squared()).sum::<f64>() / gt_pairs.len() as f64;
    let index = BallIndex::build(dst, eval.overlap_radius)?;
    let overlap = overlap_ratio(t, src, dst, &index, eval.overlap_radius);
    Ok(Verdict {
        correct: sq < eval.tau * eval.tau && overlap >= eval.overlap_threshold,
        rmse,
        overlap,
    })
}

// ---------------------------------------------------------------------------
// Fragment registration benchmark

/// Two fragments with the transform taking `src` coordinates into `dst`
/// coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FragmentPair {
    pub src: usize,
    pub dst: usize,
    pub gt: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub keypoint_voxel: f64,
    pub patch_radius: f64,
    pub ransac: RansacConfig,
    pub eval: RegistrationEval,
    /// Radius for pairing ground-truth correspondences.
    pub gt_radius: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            keypoint_voxel: DEFAULT_KEYPOINT_VOXEL,
            patch_radius: crate::datagen::DEFAULT_RADIUS,
            ransac: RansacConfig::default(),
            eval: RegistrationEval::default(),
            gt_radius: 0.05,
            seed: 0,
        }
    }
}

/// Keypoints of a fragment with their 3D patches (keypoints whose ball is
/// too sparse are dropped).
#[derive(Clone, Debug)]
pub struct KeypointSet {
    pub points: Vec<Point3<f64>>,
    pub patches: Vec<PointPatch>,
}

pub fn fragment_keypoints(cloud: &PointCloud, num_points: usize, cfg: &RegistrationConfig) -> Result<KeypointSet> {
    let kp = downsample_keypoints(&cloud.points, cfg.keypoint_voxel)?;
    let index = BallIndex::build(&cloud.points, cfg.patch_radius)?;
    let extracted: Vec<Option<(Point3<f64>, PointPatch)>> = kp
        .par_iter()
        .map(|&i| {
            let c = cloud.points[i];
            let patch = extract_3d_patch(cloud, &index, &c, cfg.patch_radius, num_points, patch_seed(cfg.seed, i as u64))?;
            Ok(patch.map(|p| (c, p)))
        })
        .collect::<Result<_>>()?;
    let (points, patches) = extracted.into_iter().flatten().unzip();
    Ok(KeypointSet { points, patches })
}

/// Ground-truth pairs: `src` keypoints whose transformed position has a
/// `dst` point within `radius`, paired with that nearest point.
pub fn ground_truth_pairs(
    src_kps: &[Point3<f64>],
    dst: &[Point3<f64>],
    gt: &RigidTransform,
    radius: f64,
) -> Result<Vec<(Point3<f64>, Point3<f64>)>> {
    let index = BallIndex::build(dst, radius)?;
    Ok(src_kps
        .iter()
        .filter_map(|p| {
            let q = gt.transform(p);
            index.nearest_within(dst, &q, radius).map(|(j, _)| (*p, dst[j]))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub src: usize,
    pub dst: usize,
    pub status: String,
    pub correct: bool,
    pub rmse: Option<f64>,
    pub overlap: Option<f64>,
    pub matches: usize,
    pub inliers: usize,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub pairs: Vec<PairReport>,
}

/// Scores `estimate(pair)` for every pair; a `None` estimate is a failure.
pub fn registration_recall(
    fragments: &[PointCloud],
    pairs: &[FragmentPair],
    cfg: &RegistrationConfig,
    mut estimate: impl FnMut(&FragmentPair) -> Result<(Option<RigidTransform>, usize, usize)>,
) -> Result<RecallReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("fragment pair list".into()));
    }
    let mut reports = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (src, dst) = (
            fragments.get(pair.src).ok_or_else(|| Error::InvalidArgument(format!("fragment {} missing", pair.src)))?,
            fragments.get(pair.dst).ok_or_else(|| Error::InvalidArgument(format!("fragment {} missing", pair.dst)))?,
        );
        let kps = downsample_keypoints(&src.points, cfg.keypoint_voxel)?;
        let kp_points: Vec<Point3<f64>> = kps.iter().map(|&i| src.points[i]).collect();
        let gt_pairs = ground_truth_pairs(&kp_points, &dst.points, &pair.gt, cfg.gt_radius)?;
        let (t, matches, inliers) = estimate(pair)?;
        let report = match t {
            None => PairReport {
                src: pair.src,
                dst: pair.dst,
                status: "ransac_failed".into(),
                correct: false,
                rmse: None,
                overlap: None,
                matches,
                inliers,
                rotation_error_deg: None,
                translation_error_m: None,
            },
            Some(t) => {
                let v = registration_correct(&t, &cfg.eval, &gt_pairs, &src.points, &dst.points)?;
                let (r, tr) = transform_error_deg_m(&t, &pair.gt);
                PairReport {
                    src: pair.src,
                    dst: pair.dst,
                    status: "registered".into(),
                    correct: v.correct,
                    rmse: Some(v.rmse),
                    overlap: Some(v.overlap),
                    matches,
                    inliers,
                    rotation_error_deg: Some(r),
                    translation_error_m: Some(tr),
                }
            }
        };
        reports.push(report);
    }
    let recall = reports.iter().filter(|r| r.correct).count() as f64 / reports.len() as f64;
    Ok(RecallReport { recall, pairs: reports })
}

/// Descriptor pipeline: keypoints, 3D descriptors, nearest-neighbor
/// matches, RANSAC.
pub fn register_with_model(
    model: &DualAutoEncoder<f32>,
    src: &PointCloud,
    dst: &PointCloud,
    cfg: &RegistrationConfig,
) -> Result<(Option<RigidTransform>, usize, usize)> {
    let n = model.config.num_points;
    let a = fragment_keypoints(src, n, cfg)?;
    let b = fragment_keypoints(dst, n, cfg)?;
    if a.points.len() < 3 || b.points.len() < 3 {
        return Ok((None, 0, 0));
    }
    let da: Vec<Descriptor> = model.encode_3d_batch(&a.patches)?;
    let db: Vec<Descriptor> = model.encode_3d_batch(&b.patches)?;
    let matches = match_nn(&da, &db)?;
    match ransac_register(&a.points, &b.points, &matches, &cfg.ransac)? {
        RansacOutcome::Success(f) => Ok((Some(f.transform), matches.len(), f.inliers.len())),
        RansacOutcome::Failed { best_inliers } => Ok((None, matches.len(), best_inliers)),
    }
}

/// Random rigid transform with rotation angle at most `max_deg` about a
/// random axis and translation components in `[-max_t, max_t]`.
pub fn random_transform(rng: &mut impl Rng, max_deg: f64, max_t: f64) -> RigidTransform {
    let axis = loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            break v / n;
        }
    };
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), angle);
    let t = Vector3::new(
        rng.random_range(-max_t..=max_t),
        rng.random_range(-max_t..=max_t),
        rng.random_range(-max_t..=max_t),
    );
    Pose::new(*r.matrix(), t).expect("rotation matrix")
}

/// Fragments fused from short runs of frames on a circular trajectory in a
/// synthetic room, each stored in its own randomly perturbed frame, with
/// ground truth for every consecutive pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FragmentConfig {
    pub fragments: usize,
    pub frames_per_fragment: usize,
    /// Angular step between frames of one fragment, degrees.
    pub frame_step_deg: f64,
    /// Angular step between consecutive fragments, degrees.
    pub spacing_deg: f64,
    /// Bound on each fragment frame's rotation away from the world frame.
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub cloud_voxel: f64,
    pub seed: u64,
}

impl Default for FragmentConfig {
    fn default() -> Self {
        Self {
            fragments: 9,
            frames_per_fragment: 3,
            frame_step_deg: 4.0,
            spacing_deg: 20.0,
            max_rotation_deg: 10.0,
            max_translation: 0.5,
            cloud_voxel: 0.03,
            seed: 0,
        }
    }
}

pub fn synthetic_fragments(cfg: &FragmentConfig) -> Result<(Vec<PointCloud>, Vec<FragmentPair>)> {
    if cfg.fragments < 2 || cfg.frames_per_fragment == 0 {
        return Err(Error::InvalidArgument("need at least 2 fragments of at least 1 frame".into()));
    }
    let mut spec = crate::datagen::SceneSpec::room(cfg.seed, 1);
    spec.translate(crate::retrieval::ROOM_SHIFT);
    spec.cloud_voxel = cfg.cloud_voxel;
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed(cfg.seed, 0xF7A6));
    let half = (cfg.frames_per_fragment as f64 - 1.0) / 2.0;
    let mut clouds = Vec::with_capacity(cfg.fragments);
    let mut frames = Vec::with_capacity(cfg.fragments);
    for f in 0..cfg.fragments {
        let base = (f as f64 * cfg.spacing_deg).to_radians();
        spec.cameras = (0..cfg.frames_per_fragment)
            .map(|i| crate::retrieval::ring_pose(base + ((i as f64 - half) * cfg.frame_step_deg).to_radians(), 2.0, 1.4, 0.0))
            .collect();
        let world = crate::datagen::synth_scene(cfg.seed, &spec)?.cloud;
        let t = random_transform(&mut rng, cfg.max_rotation_deg, cfg.max_translation);
        clouds.push(world.transformed(&t));
        frames.push(t);
    }
    let pairs = (0..cfg.fragments - 1)
        .map(|i| FragmentPair {
            src: i,
            dst: i + 1,
            gt: frames[i + 1].compose(&frames[i].inverse()),
        })
        .collect();
    Ok((clouds, pairs))
}
