use std::fs;
use std::path::PathBuf;

use clap::Args;
use crossdesc_core::datagen::{CameraIntrinsics, Pose};
use crossdesc_core::depthmap::*;
use crossdesc_core::io::{decode_pgm16, decode_ppm, encode_pgm16, parse_pose, write_atomic};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::load_model;
use crate::config::{self, overlay, require};
use crate::{CliError, Globals, Outcome, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthRun {
    pub seed: u64,
    /// Color image (PPM).
    pub image: Option<PathBuf>,
    /// Sparse samples (JSON with samples and intrinsics).
    pub sparse: Option<PathBuf>,
    /// Ground-truth depth (16-bit PGM, millimeters): scored against, and
    /// sampled when `sparse` is unset.
    pub gt: Option<PathBuf>,
    /// Camera intrinsics (JSON), needed when sampling from `gt`.
    pub intrinsics: Option<PathBuf>,
    pub samples: usize,
    /// Model decoder when set; otherwise the ground-truth oracle.
    pub checkpoint: Option<PathBuf>,
    /// Camera-from-world pose (4×4 text) whose rotation orients decoded
    /// patches; identity when unset.
    pub pose: Option<PathBuf>,
    pub oracle_points: usize,
    pub depth: DepthConfig,
    pub out: Option<PathBuf>,
}

impl Default for DepthRun {
    fn default() -> Self {
        Self {
            seed: 0,
            image: None,
            sparse: None,
            gt: None,
            intrinsics: None,
            samples: DEFAULT_SPARSE_COUNT,
            checkpoint: None,
            pose: None,
            oracle_points: 256,
            depth: DepthConfig::default(),
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct DepthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    sparse: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Number of sparse samples drawn from the ground truth.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pose: Option<PathBuf>,
    /// Depth map (16-bit PGM) to write; metrics and samples go beside it.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn depth(a: DepthArgs, g: Globals) -> Result<Outcome> {
    let mut run: DepthRun = config::load(a.config.as_deref())?;
    overlay!(run, a; image, sparse, gt, intrinsics, samples, checkpoint, pose, out);
    overlay!(run, g; seed);
    let image_p = require(&run.image, "--image")?;
    let out = require(&run.out, "--out")?;
    if run.sparse.is_none() && (run.gt.is_none() || run.intrinsics.is_none()) {
        return Err(CliError::Usage("need --sparse, or --gt with --intrinsics".into()));
    }
    if run.checkpoint.is_none() && run.gt.is_none() {
        return Err(CliError::Usage("the oracle decoder needs --gt (or pass --checkpoint)".into()));
    }
    config::snapshot(out, false, &run)?;
    let image = decode_ppm(&fs::read(image_p)?)?;
    let gt = run.gt.as_deref().map(|p| -> Result<_> { Ok(decode_pgm16(&fs::read(p)?)?) }).transpose()?;
    let sparse = match (&run.sparse, &gt, &run.intrinsics) {
        (Some(p), _, _) => {
            let s: SparseDepth = config::read_json(p)?;
            s.validate()?;
            s
        }
        (None, Some(gt), Some(k)) => {
            let k: CameraIntrinsics = config::read_json(k)?;
            sample_sparse(gt, k, run.samples, run.seed)?
        }
        _ => unreachable!("checked above"),
    };
    let model = run.checkpoint.as_deref().map(load_model).transpose()?;
    let rotation = match &run.pose {
        Some(p) => parse_pose(&fs::read_to_string(p)?)?.rotation,
        None => Pose::identity().rotation,
    };
    let decoder = match (&model, &gt) {
        (Some(m), _) => PatchDecoder::Model { model: m, rotation },
        (None, Some(gt)) => PatchDecoder::Oracle { gt, num_points: run.oracle_points, seed: run.seed },
        (None, None) => unreachable!("checked above"),
    };
    let (pred, report) = predict_depth(&image, &sparse, &decoder, &run.depth)?;
    write_atomic(out, &encode_pgm16(&pred))?;
    config::write_json(&config::sibling(out, ".sparse.json"), &sparse)?;
    let scored = match &gt {
        Some(gt) => Some((depth_metrics(&pred, gt)?, depth_metrics(&constant_baseline(&sparse)?, gt)?)),
        None => None,
    };
    let metrics = scored.map(|(m, b)| json!({ "prediction": m, "baseline": b }));
    config::write_json(&config::sibling(out, ".metrics.json"), &json!({ "metrics": metrics, "report": report }))?;
    Ok(json!({
        "decoder": if model.is_some() { "model" } else { "oracle" },
        "samples": sparse.samples.len(),
        "patches": report.patches,
        "metrics": metrics,
        "out": out,
    })
    .into())
}
