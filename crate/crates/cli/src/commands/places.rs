use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use crossdesc_core::datagen::{patch_seed, PointCloud, Pose, RgbdFrame};
use crossdesc_core::descnet::DualAutoEncoder;
use crossdesc_core::io::{load_scene, write_atomic};
use crossdesc_core::retrieval::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{load_model, PlacesManifest};
use crate::config::{self, overlay, require};
use crate::{CliError, Globals, Outcome, Result};

/// Position-embedding encoder used when no checkpoint is given.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSpec {
    pub dim: usize,
    pub length: f64,
    pub seed: u64,
    pub cloud_voxel: f64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            dim: 64,
            length: 0.25,
            seed: 7,
            cloud_voxel: 0.03,
        }
    }
}

fn encoder<'a>(model: Option<&'a DualAutoEncoder<f32>>, o: &OracleSpec) -> PlaceEncoder<'a> {
    match model {
        Some(m) => PlaceEncoder::Model(m),
        None => PlaceEncoder::Oracle {
            embedding: PositionEmbedding::new(o.dim, o.length, o.seed),
            cloud_voxel: o.cloud_voxel,
        },
    }
}

fn maybe_model(p: &Option<PathBuf>) -> Result<Option<DualAutoEncoder<f32>>> {
    p.as_deref().map(load_model).transpose()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--sigma must be a finite non-negative number, got {sigma}")))
    }
}

/// Noise parameters for query `i`; `None` when `sigma` is zero.
fn query_noise(sigma: f64, seed: u64, i: u64) -> Option<(f64, u64)> {
    (sigma > 0.0).then(|| (sigma, patch_seed(seed, i)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildIndexRun {
    pub seed: u64,
    pub places: Option<PathBuf>,
    /// Oracle encoder when unset.
    pub checkpoint: Option<PathBuf>,
    pub oracle: OracleSpec,
    pub sampling: SamplingConfig,
    pub k: usize,
    pub vlad: VladOptions,
    pub out: Option<PathBuf>,
}

impl Default for BuildIndexRun {
    fn default() -> Self {
        Self {
            seed: 0,
            places: None,
            checkpoint: None,
            oracle: OracleSpec::default(),
            sampling: SamplingConfig::default(),
            k: DEFAULT_CODEBOOK_SIZE,
            vlad: VladOptions::default(),
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Places manifest written by gen-synth.
    #[arg(long)]
    places: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Codebook size.
    #[arg(long)]
    k: Option<usize>,
    /// Index file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn index_of(
    submaps: &[(u64, PointCloud, Pose)],
    enc: &PlaceEncoder,
    sampling: &SamplingConfig,
    k: usize,
    opts: VladOptions,
) -> Result<PlaceIndex> {
    let refs: Vec<(u64, &PointCloud, Pose)> = submaps.iter().map(|(i, c, p)| (*i, c, *p)).collect();
    Ok(crossdesc_core::retrieval::build_index(&refs, enc, sampling, k, opts)?)
}

pub fn build_index(a: BuildIndexArgs, g: Globals) -> Result<Outcome> {
    let mut run: BuildIndexRun = config::load(a.config.as_deref())?;
    overlay!(run, a; places, checkpoint, k, out);
    overlay!(run, g; seed);
    run.sampling.seed = run.seed;
    let places = require(&run.places, "--places")?;
    let out = require(&run.out, "--out")?;
    config::snapshot(out, false, &run)?;
    let model = maybe_model(&run.checkpoint)?;
    let enc = encoder(model.as_ref(), &run.oracle);
    let (submaps, _) = PlacesManifest::load(places)?;
    let index = index_of(&submaps, &enc, &run.sampling, run.k, run.vlad)?;
    write_atomic(out, &index.encode())?;
    Ok(json!({
        "entries": index.entries.len(),
        "k": index.codebook.k(),
        "degenerate": index.entries.iter().filter(|e| e.vlad.degenerate).count(),
        "out": out,
    })
    .into())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryRun {
    pub seed: u64,
    pub index: Option<PathBuf>,
    /// Scene directory of query frames.
    pub queries: Option<PathBuf>,
    /// Only this frame index when set.
    pub frame: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub oracle: OracleSpec,
    pub sampling: SamplingConfig,
    pub n: usize,
    /// Gaussian noise on query patches (model encoder only).
    pub sigma: f64,
    pub out: Option<PathBuf>,
}

impl Default for QueryRun {
    fn default() -> Self {
        Self {
            seed: 0,
            index: None,
            queries: None,
            frame: None,
            checkpoint: None,
            oracle: OracleSpec::default(),
            sampling: SamplingConfig::default(),
            n: 10,
            sigma: 0.0,
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    frame: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of ranked results per query.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Ranked lists (JSON) to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct QueryResult {
    frame: usize,
    ranked: Vec<Ranked>,
}

fn run_queries(
    index: &PlaceIndex,
    frames: &[&RgbdFrame],
    enc: &PlaceEncoder,
    sampling: &SamplingConfig,
    sigma: f64,
    seed: u64,
    n: usize,
) -> Result<Vec<Vec<Ranked>>> {
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| Ok(query_frame(index, f, enc, sampling, query_noise(sigma, seed, i as u64), n)?))
        .collect()
}

fn load_queries(dir: &Path) -> Result<Vec<RgbdFrame>> {
    Ok(load_scene(dir)?.frames)
}

pub fn query(a: QueryArgs, g: Globals) -> Result<Outcome> {
    let mut run: QueryRun = config::load(a.config.as_deref())?;
    overlay!(run, a; index, queries, frame, checkpoint, n, sigma, out);
    overlay!(run, g; seed);
    check_sigma(run.sigma)?;
    let index_p = require(&run.index, "--index")?;
    let queries = require(&run.queries, "--queries")?;
    if let Some(out) = &run.out {
        config::snapshot(out, false, &run)?;
    }
    let index = PlaceIndex::decode(&std::fs::read(index_p)?)?;
    let model = maybe_model(&run.checkpoint)?;
    let enc = encoder(model.as_ref(), &run.oracle);
    let frames = load_queries(queries)?;
    let chosen: Vec<&RgbdFrame> = frames.iter().filter(|f| run.frame.is_none_or(|i| f.index == i)).collect();
    if chosen.is_empty() {
        return Err(crossdesc_core::Error::Empty("query frame selection".into()).into());
    }
    let ranked = run_queries(&index, &chosen, &enc, &run.sampling, run.sigma, run.seed, run.n)?;
    let results: Vec<QueryResult> = chosen
        .iter()
        .zip(ranked)
        .map(|(f, ranked)| QueryResult { frame: f.index, ranked })
        .collect();
    if let Some(out) = &run.out {
        config::write_json(out, &results)?;
    }
    let top1: Vec<Option<u64>> = results.iter().map(|r| r.ranked.first().map(|x| x.id)).collect();
    Ok(json!({ "queries": results.len(), "top1": top1 }).into())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchRecallRun {
    pub seed: u64,
    /// Places manifest; a synthetic benchmark is generated when unset.
    pub places: Option<PathBuf>,
    pub benchmark: PlaceBenchmarkConfig,
    pub checkpoint: Option<PathBuf>,
    pub oracle: OracleSpec,
    pub sampling: SamplingConfig,
    pub k: usize,
    pub vlad: VladOptions,
    pub sigma: f64,
    pub max_n: usize,
    pub out: Option<PathBuf>,
}

impl Default for BenchRecallRun {
    fn default() -> Self {
        Self {
            seed: 0,
            places: None,
            benchmark: PlaceBenchmarkConfig::default(),
            checkpoint: None,
            oracle: OracleSpec::default(),
            sampling: SamplingConfig::default(),
            k: DEFAULT_CODEBOOK_SIZE,
            vlad: VladOptions::default(),
            sigma: 0.0,
            max_n: 10,
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct BenchRecallArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    places: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Gaussian noise on query patches (model encoder only).
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_n: Option<usize>,
    /// Output directory for the index and report.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn bench_recall(a: BenchRecallArgs, g: Globals) -> Result<Outcome> {
    let mut run: BenchRecallRun = config::load(a.config.as_deref())?;
    overlay!(run, a; places, checkpoint, k, sigma, max_n, out);
    overlay!(run, g; seed);
    run.sampling.seed = run.seed;
    check_sigma(run.sigma)?;
    if run.max_n == 0 {
        return Err(CliError::Usage("--max-n must be at least 1".into()));
    }
    let out = require(&run.out, "--out")?;
    config::snapshot(out, true, &run)?;
    let model = maybe_model(&run.checkpoint)?;
    let enc = encoder(model.as_ref(), &run.oracle);
    let (submaps, queries) = match &run.places {
        Some(p) => {
            let (submaps, dir) = PlacesManifest::load(p)?;
            (submaps, load_queries(&dir)?)
        }
        None => {
            let b = synthetic_places(run.seed, &run.benchmark)?;
            let submaps = b
                .submaps
                .into_iter()
                .zip(b.anchors)
                .enumerate()
                .map(|(i, (c, p))| (i as u64, c, p))
                .collect();
            (submaps, b.queries)
        }
    };
    let index = index_of(&submaps, &enc, &run.sampling, run.k, run.vlad)?;
    let frames: Vec<&RgbdFrame> = queries.iter().collect();
    let results = run_queries(&index, &frames, &enc, &run.sampling, run.sigma, run.seed, run.max_n)?;
    let poses: BTreeMap<u64, Pose> = index.entries.iter().map(|e| (e.id, e.pose)).collect();
    let qposes: Vec<Option<Pose>> = queries.iter().map(|q| Some(q.pose)).collect();
    let ns: Vec<usize> = (1..=run.max_n).collect();
    let curve = recall_at_n(&results, &qposes, &poses, DEFAULT_D_MAX, DEFAULT_THETA_MAX_DEG, &ns)?;
    let report = PlaceRunReport {
        curve,
        results,
        codebook_reseeded: index.codebook.reseeded.len(),
        codebook_collapsed: index.codebook.collapsed.len(),
    };
    write_atomic(&out.join("index.lcdv"), &index.encode())?;
    config::write_json(&out.join("report.json"), &report)?;
    let at = |n: usize| report.curve.recall.get(n - 1).copied();
    Ok(json!({
        "submaps": index.entries.len(),
        "queries": queries.len(),
        "sigma": run.sigma,
        "recall_at_1": at(1),
        "recall_at_5": at(5.min(run.max_n)),
        "recall_at_10": at(10.min(run.max_n)),
        "out": out,
    })
    .into())
}
