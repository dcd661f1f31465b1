use std::path::PathBuf;

use clap::Args;
use crossdesc_core::datagen::*;
use crossdesc_core::geomatch::*;
use crossdesc_core::io::{load_scene, parse_pose};
use crossdesc_core::retrieval::grid_centers;
use crossdesc_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{load_model, read_cloud, PairsManifest};
use crate::config::{self, overlay, require};
use crate::{Globals, Outcome, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Match2dRun {
    pub scene: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub frame_a: usize,
    pub frame_b: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub window: PatchWindow,
    pub depth_tolerance: f64,
    /// Pixel distance within which a match counts as true (inclusive).
    pub tolerance: f64,
    pub out: Option<PathBuf>,
}

impl Default for Match2dRun {
    fn default() -> Self {
        Self {
            scene: None,
            checkpoint: None,
            frame_a: 0,
            frame_b: 1,
            grid_rows: 16,
            grid_cols: 16,
            window: PatchWindow::DepthScaled { radius: DEFAULT_RADIUS },
            depth_tolerance: DEFAULT_DEPTH_TOLERANCE,
            tolerance: DEFAULT_PIXEL_TOLERANCE,
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct Match2dArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    frame_a: Option<usize>,
    #[arg(long)]
    frame_b: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    /// Match list (JSON) to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct MatchOut {
    a: usize,
    b: usize,
    pixel_a: [f64; 2],
    pixel_b: [f64; 2],
    truth: [f64; 2],
    distance: f64,
    correct: bool,
}

fn frame(scene: &Scene, index: usize) -> Result<&RgbdFrame> {
    Ok(scene
        .frames
        .iter()
        .find(|f| f.index == index)
        .ok_or_else(|| Error::InvalidArgument(format!("scene has no frame {index}")))?)
}

/// Grid keypoints of frame A with valid depth that are visible in frame B
/// are projected into B; B's keypoints are those projections. Every 2D
/// descriptor of A is matched to its nearest descriptor of B.
pub fn match_2d(a: Match2dArgs, _g: Globals) -> Result<Outcome> {
    let mut run: Match2dRun = config::load(a.config.as_deref())?;
    overlay!(run, a; scene, checkpoint, frame_a, frame_b, tolerance, out);
    let scene_dir = require(&run.scene, "--scene")?;
    let ckpt = require(&run.checkpoint, "--checkpoint")?;
    if let Some(out) = &run.out {
        config::snapshot(out, false, &run)?;
    }
    let model = load_model(ckpt)?;
    let scene = load_scene(scene_dir)?;
    let (fa, fb) = (frame(&scene, run.frame_a)?, frame(&scene, run.frame_b)?);
    let size = model.config.patch_size;
    let k = fa.intrinsics;
    let mut kp_a = Vec::new();
    let mut kp_b = Vec::new();
    let mut patches_a = Vec::new();
    let mut patches_b = Vec::new();
    for [u, v] in grid_centers(k.width, k.height, run.grid_rows, run.grid_cols) {
        let Some((x, y)) = fa.pixel_of(u, v) else { continue };
        let d = fa.depth.get(x, y);
        if d <= 0.0 {
            continue;
        }
        let p = backproject(u, v, d, &k, &fa.pose);
        if !visible(&p, fb, run.depth_tolerance) {
            continue;
        }
        let q = project(&p, &fb.intrinsics, &fb.pose);
        let pa = extract_2d_patch(&fa.color, u, v, run.window.side(k.fx, d), size)?;
        let pb = extract_2d_patch(&fb.color, q.u, q.v, run.window.side(fb.intrinsics.fx, q.depth), size)?;
        if let (Some(pa), Some(pb)) = (pa, pb) {
            kp_a.push([u, v]);
            kp_b.push([q.u, q.v]);
            patches_a.push(pa);
            patches_b.push(pb);
        }
    }
    if kp_a.is_empty() {
        return Err(Error::Empty(format!("no keypoints of frame {} are visible in frame {}", run.frame_a, run.frame_b)).into());
    }
    let da = model.encode_2d_batch(&patches_a)?;
    let db = model.encode_2d_batch(&patches_b)?;
    let matches = match_nn(&da, &db)?;
    let truth: Vec<Option<[f64; 2]>> = kp_b.iter().copied().map(Some).collect();
    let precision = matching_precision(&matches, &kp_b, &truth, run.tolerance)?.unwrap_or(0.0);
    if let Some(out) = &run.out {
        let list: Vec<MatchOut> = matches
            .iter()
            .map(|m| {
                let (pb, t) = (kp_b[m.index_b], kp_b[m.index_a]);
                MatchOut {
                    a: m.index_a,
                    b: m.index_b,
                    pixel_a: kp_a[m.index_a],
                    pixel_b: pb,
                    truth: t,
                    distance: m.distance,
                    correct: (pb[0] - t[0]).hypot(pb[1] - t[1]) <= run.tolerance,
                }
            })
            .collect();
        config::write_json(out, &json!({ "precision": precision, "matches": list }))?;
    }
    Ok(json!({
        "frame_a": run.frame_a,
        "frame_b": run.frame_b,
        "keypoints": kp_a.len(),
        "precision": precision,
    })
    .into())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegisterRun {
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub src: Option<PathBuf>,
    pub dst: Option<PathBuf>,
    /// Ground-truth src-to-dst transform (4×4 row-major text) for scoring.
    pub gt: Option<PathBuf>,
    pub registration: RegistrationConfig,
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source fragment (PLY).
    #[arg(long)]
    src: Option<PathBuf>,
    /// Target fragment (PLY).
    #[arg(long)]
    dst: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Result (JSON) to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seeded(cfg: &mut RegistrationConfig, seed: u64) {
    cfg.seed = seed;
    cfg.ransac.seed = seed;
}

pub fn register(a: RegisterArgs, g: Globals) -> Result<Outcome> {
    let mut run: RegisterRun = config::load(a.config.as_deref())?;
    overlay!(run, a; checkpoint, src, dst, gt, out);
    overlay!(run, g; seed);
    seeded(&mut run.registration, run.seed);
    let ckpt = require(&run.checkpoint, "--checkpoint")?;
    let (src_p, dst_p) = (require(&run.src, "--src")?, require(&run.dst, "--dst")?);
    if let Some(out) = &run.out {
        config::snapshot(out, false, &run)?;
    }
    let model = load_model(ckpt)?;
    let clouds = [read_cloud(src_p)?, read_cloud(dst_p)?];
    let cfg = &run.registration;
    let (transform, matches, inliers) = register_with_model(&model, &clouds[0], &clouds[1], cfg)?;
    let verdict = match &run.gt {
        Some(p) => {
            let gt = parse_pose(&std::fs::read_to_string(p)?)?;
            let pair = FragmentPair { src: 0, dst: 1, gt };
            let rep = registration_recall(&clouds, &[pair], cfg, |_| Ok((transform, matches, inliers)))?;
            rep.pairs.into_iter().next()
        }
        None => None,
    };
    let result = json!({ "transform": transform, "matches": matches, "inliers": inliers, "verdict": verdict });
    if let Some(out) = &run.out {
        config::write_json(out, &result)?;
    }
    Ok(result.into())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchRegisterRun {
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
    /// Pairs manifest; synthetic fragments are generated when unset.
    pub pairs: Option<PathBuf>,
    pub fragments: FragmentConfig,
    pub registration: RegistrationConfig,
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchRegisterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Report (JSON) to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench_register(a: BenchRegisterArgs, g: Globals) -> Result<Outcome> {
    let mut run: BenchRegisterRun = config::load(a.config.as_deref())?;
    overlay!(run, a; checkpoint, pairs, out);
    overlay!(run, g; seed);
    seeded(&mut run.registration, run.seed);
    run.fragments.seed = run.seed;
    let ckpt = require(&run.checkpoint, "--checkpoint")?;
    let out = require(&run.out, "--out")?;
    config::snapshot(out, false, &run)?;
    let model = load_model(ckpt)?;
    let (clouds, pairs) = match &run.pairs {
        Some(p) => PairsManifest::load(p)?,
        None => synthetic_fragments(&run.fragments)?,
    };
    let cfg = &run.registration;
    let report = registration_recall(&clouds, &pairs, cfg, |p| {
        let (src, dst) = (&clouds[p.src], &clouds[p.dst]);
        Ok(register_with_model(&model, src, dst, cfg)?)
    })?;
    config::write_json(out, &report)?;
    Ok(json!({
        "recall": report.recall,
        "pairs": report.pairs.len(),
        "correct": report.pairs.iter().filter(|p| p.correct).count(),
        "out": out,
    })
    .into())
}
