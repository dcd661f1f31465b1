use std::path::PathBuf;

use clap::{Args, ValueEnum};
use crossdesc_core::datagen::CorrespondenceRecord;
use crossdesc_core::descnet::{DualAutoEncoder, ImagePatch, NetworkConfig, PointPatch};
use crossdesc_core::io::{encode_ppm, load_records, write_atomic, DescriptorFile};
use crossdesc_core::raster::ColorImage;
use crossdesc_core::trainer::{evaluate_matching_accuracy, train as train_model, TrainConfig};
use crossdesc_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::gradcheck;
use super::load_model;
use crate::config::{self, overlay, require};
use crate::{CliError, Globals, Outcome, Result};

/// Layer widths of the dual auto-encoder; patch size and point count come
/// from the training records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSpec {
    pub descriptor_dim: usize,
    pub conv_widths: Vec<usize>,
    pub point_widths: Vec<usize>,
    pub point_decoder_widths: Vec<usize>,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            descriptor_dim: 64,
            conv_widths: vec![16, 32, 64],
            point_widths: vec![32, 64, 128],
            point_decoder_widths: vec![256, 512],
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub seed: u64,
    pub records: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub limit: Option<usize>,
    pub network: NetSpec,
    pub train: TrainConfig,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    /// Output directory for checkpoints, log and report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Descriptor dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Train on the first `limit` records only.
    #[arg(long)]
    limit: Option<usize>,
}

fn load_limited(path: &std::path::Path, limit: Option<usize>) -> Result<Vec<CorrespondenceRecord>> {
    let mut records = load_records(path)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    if records.is_empty() {
        return Err(Error::Empty(format!("record container {}", path.display())).into());
    }
    Ok(records)
}

pub fn train(a: TrainArgs, g: Globals) -> Result<Outcome> {
    let mut run: TrainRun = config::load(a.config.as_deref())?;
    overlay!(run, a; records, out, limit);
    overlay!(run, g; seed);
    if let Some(e) = a.epochs {
        run.train.epochs = e;
    }
    if let Some(d) = a.dim {
        run.network.descriptor_dim = d;
    }
    run.train.seed = run.seed;
    let records_path = require(&run.records, "--records")?;
    let out = require(&run.out, "--out")?;
    run.train.validate()?;
    config::snapshot(out, true, &run)?;
    let records = load_limited(records_path, run.limit)?;
    let n = &run.network;
    let net = NetworkConfig::build(
        n.descriptor_dim,
        records[0].points.len(),
        records[0].image.size(),
        &n.conv_widths,
        &n.point_widths,
        &n.point_decoder_widths,
        run.seed,
    );
    let mut model = DualAutoEncoder::<f32>::new(net)?;
    let report = train_model(&mut model, &records, &run.train, Some(out))?;
    config::write_json(&out.join("report.json"), &report)?;
    let accuracy = evaluate_matching_accuracy(&model, &records)?;
    let first = report.epochs.first().map_or(f64::NAN, |e| e.total);
    let last = report.epochs.last().map_or(f64::NAN, |e| e.total);
    Ok(json!({
        "records": records.len(),
        "epochs": report.epochs.len(),
        "first_total": first,
        "final_total": last,
        "loss_drop": 1.0 - last / first,
        "top1_accuracy": accuracy,
        "final_checkpoint": report.final_checkpoint,
        "wall_clock_s": report.wall_clock_s,
    })
    .into())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum Side {
    #[default]
    #[serde(rename = "2d")]
    #[value(name = "2d")]
    Image,
    #[serde(rename = "3d")]
    #[value(name = "3d")]
    Points,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncodeRun {
    pub records: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub domain: Side,
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    domain: Option<Side>,
    /// Descriptor file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Descriptors of one side with the record's keypoint as metadata: the
/// pixel for 2D, the world center for 3D.
fn descriptor_file(model: &DualAutoEncoder<f32>, records: &[CorrespondenceRecord], side: Side) -> Result<DescriptorFile> {
    let (descs, meta) = match side {
        Side::Image => {
            let patches: Vec<ImagePatch> = records.iter().map(|r| r.image.clone()).collect();
            let meta = (2, records.iter().flat_map(|r| r.pixel.map(|v| v as f32)).collect());
            (model.encode_2d_batch(&patches)?, meta)
        }
        Side::Points => {
            let patches: Vec<PointPatch> = records.iter().map(|r| r.points.clone()).collect();
            let meta = (3, records.iter().flat_map(|r| r.center.map(|v| v as f32)).collect());
            (model.encode_3d_batch(&patches)?, meta)
        }
    };
    let values = descs.into_iter().flat_map(|d| d.values).collect();
    Ok(DescriptorFile::new(model.dim(), values, Some(meta))?)
}

pub fn encode(a: EncodeArgs, _g: Globals) -> Result<Outcome> {
    let mut run: EncodeRun = config::load(a.config.as_deref())?;
    overlay!(run, a; records, checkpoint, domain, out);
    let records_path = require(&run.records, "--records")?;
    let ckpt = require(&run.checkpoint, "--checkpoint")?;
    let out = require(&run.out, "--out")?;
    config::snapshot(out, false, &run)?;
    let model = load_model(ckpt)?;
    let records = load_limited(records_path, None)?;
    let file = descriptor_file(&model, &records, run.domain)?;
    write_atomic(out, &file.encode())?;
    Ok(json!({ "count": file.count(), "dim": file.dim, "domain": run.domain, "out": out }).into())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportRun {
    pub records: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Thumbnail atlas width in tiles; square-ish when unset.
    pub columns: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    columns: Option<usize>,
}

#[derive(Serialize)]
struct Tile<'a> {
    record: usize,
    x: usize,
    y: usize,
    scene: &'a str,
    frame: usize,
    point_id: usize,
    pixel: [f64; 2],
}

/// 2D and 3D descriptor files plus a thumbnail atlas of the image patches
/// and its per-record tile index.
pub fn export(a: ExportArgs, _g: Globals) -> Result<Outcome> {
    let mut run: ExportRun = config::load(a.config.as_deref())?;
    overlay!(run, a; records, checkpoint, out, columns);
    let records_path = require(&run.records, "--records")?;
    let ckpt = require(&run.checkpoint, "--checkpoint")?;
    let out = require(&run.out, "--out")?;
    if run.columns == Some(0) {
        return Err(CliError::Usage("--columns must be at least 1".into()));
    }
    config::snapshot(out, true, &run)?;
    let model = load_model(ckpt)?;
    let records = load_limited(records_path, None)?;
    let d2 = descriptor_file(&model, &records, Side::Image)?;
    let d3 = descriptor_file(&model, &records, Side::Points)?;
    write_atomic(&out.join("descriptors_2d.lcdd"), &d2.encode())?;
    write_atomic(&out.join("descriptors_3d.lcdd"), &d3.encode())?;

    let n = records.len();
    let s = records[0].image.size();
    let cols = run.columns.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize).min(n);
    let rows = n.div_ceil(cols);
    let atlas = ColorImage::from_fn(cols * s, rows * s, |x, y| {
        let i = (y / s) * cols + x / s;
        match records.get(i) {
            Some(r) if r.image.size() == s => r.image.pixel(x % s, y % s),
            _ => [0.0; 3],
        }
    })?;
    write_atomic(&out.join("thumbnails.ppm"), &encode_ppm(&atlas))?;
    let tiles: Vec<Tile> = records
        .iter()
        .enumerate()
        .map(|(i, r)| Tile {
            record: i,
            x: (i % cols) * s,
            y: (i / cols) * s,
            scene: &r.scene,
            frame: r.frame,
            point_id: r.point_id,
            pixel: r.pixel,
        })
        .collect();
    config::write_json(&out.join("thumbnails.json"), &json!({ "tile_size": s, "columns": cols, "tiles": tiles }))?;
    Ok(json!({ "count": n, "dim": model.dim(), "out": out }).into())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckRun {
    pub seed: u64,
    /// Number of consecutive seeds starting at `seed`.
    pub seeds: u64,
    pub epsilon: f64,
    pub threshold: f64,
}

impl Default for GradCheckRun {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: 3,
            epsilon: 1e-6,
            threshold: 1e-4,
        }
    }
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<u64>,
    /// Also write the resolved config to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn grad_check(a: GradCheckArgs, g: Globals) -> Result<Outcome> {
    let mut run: GradCheckRun = config::load(a.config.as_deref())?;
    overlay!(run, a; seeds);
    overlay!(run, g; seed);
    if run.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    if let Some(out) = &a.out {
        config::write_json(out, &run)?;
    }
    let mut worst = std::collections::BTreeMap::<String, f64>::new();
    for seed in run.seed..run.seed + run.seeds {
        for (name, err) in gradcheck::suite(seed, run.epsilon)? {
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(err);
        }
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let passed = max < run.threshold;
    let summary = json!({
        "max_relative_error": max,
        "threshold": run.threshold,
        "passed": passed,
        "seeds": run.seeds,
        "checks": worst,
    });
    let failure = (!passed)
        .then(|| Error::Numerical(format!("max relative error {max:.3e} is not below {:.0e}", run.threshold)).into());
    Ok(Outcome { summary, failure })
}
