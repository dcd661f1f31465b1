use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use crossdesc_core::datagen::*;
use crossdesc_core::geomatch::{synthetic_fragments, FragmentConfig};
use crossdesc_core::io::{decode_ppm, encode_ppm, load_records, load_scene, save_records, save_scene, write_atomic};
use crossdesc_core::raster::ColorImage;
use crossdesc_core::retrieval::{add_patch_noise, synthetic_places, PlaceBenchmarkConfig, ROOM_SHIFT};
use crossdesc_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{write_cloud, PairsManifest, PlacesManifest, SubmapEntry};
use crate::config::{self, overlay, require};
use crate::{CliError, Globals, Outcome, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Textured room with a ring of inward-looking cameras.
    #[default]
    Room,
    /// One fronto-parallel plane seen by an identity camera.
    Plane,
    /// Submaps and query frames for place recognition.
    Places,
    /// Fragment clouds with ground-truth pair transforms.
    Fragments,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthRun {
    pub seed: u64,
    pub layout: Layout,
    pub cameras: usize,
    pub plane_depth: f64,
    /// Explicit scene for the room and plane layouts.
    pub spec: Option<SceneSpec>,
    pub places: PlaceBenchmarkConfig,
    pub fragments: FragmentConfig,
    pub out: Option<PathBuf>,
}

impl Default for SynthRun {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: Layout::Room,
            cameras: 24,
            plane_depth: 2.0,
            spec: None,
            places: PlaceBenchmarkConfig::default(),
            fragments: FragmentConfig::default(),
            out: None,
        }
    }
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Run config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    layout: Option<Layout>,
    #[arg(long)]
    cameras: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gen_synth(a: GenSynthArgs, g: Globals) -> Result<Outcome> {
    let mut run: SynthRun = config::load(a.config.as_deref())?;
    overlay!(run, a; layout, cameras, out);
    overlay!(run, g; seed);
    run.fragments.seed = run.seed;
    let out = require(&run.out, "--out")?.to_path_buf();
    config::snapshot(&out, true, &run)?;
    let summary = match run.layout {
        Layout::Room | Layout::Plane => {
            let spec = match (&run.spec, run.layout) {
                (Some(s), _) => s.clone(),
                (None, Layout::Plane) => SceneSpec::plane(run.plane_depth, default_intrinsics()),
                _ => {
                    let mut s = SceneSpec::room(run.seed, run.cameras);
                    s.translate(ROOM_SHIFT);
                    s
                }
            };
            let scene = synth_scene(run.seed, &spec)?;
            save_scene(&out, &scene)?;
            config::write_json(&out.join("spec.json"), &spec)?;
            json!({ "layout": run.layout, "frames": scene.frames.len(), "cloud_points": scene.cloud.len(), "out": out })
        }
        Layout::Places => {
            let bench = synthetic_places(run.seed, &run.places)?;
            fs::create_dir_all(out.join("submaps"))?;
            let mut submaps = Vec::new();
            for (i, (cloud, pose)) in bench.submaps.iter().zip(&bench.anchors).enumerate() {
                let rel = PathBuf::from("submaps").join(format!("{i:06}.ply"));
                write_cloud(&out.join(&rel), cloud)?;
                submaps.push(SubmapEntry { id: i as u64, cloud: rel, pose: *pose });
            }
            let queries = Scene {
                name: "queries".into(),
                frames: bench.queries.clone(),
                cloud: PointCloud::default(),
            };
            save_scene(&out.join("queries"), &queries)?;
            let manifest = PlacesManifest { submaps, queries: "queries".into() };
            config::write_json(&out.join("places.json"), &manifest)?;
            json!({ "layout": run.layout, "submaps": bench.submaps.len(), "queries": bench.queries.len(), "manifest": out.join("places.json") })
        }
        Layout::Fragments => {
            let (clouds, pairs) = synthetic_fragments(&run.fragments)?;
            fs::create_dir_all(out.join("fragments"))?;
            let mut paths = Vec::new();
            for (i, c) in clouds.iter().enumerate() {
                let rel = PathBuf::from("fragments").join(format!("{i:06}.ply"));
                write_cloud(&out.join(&rel), c)?;
                paths.push(rel);
            }
            let manifest = PairsManifest { fragments: paths, pairs };
            config::write_json(&out.join("pairs.json"), &manifest)?;
            json!({ "layout": run.layout, "fragments": clouds.len(), "pairs": manifest.pairs.len(), "manifest": out.join("pairs.json") })
        }
    };
    Ok(summary.into())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataRun {
    pub seed: u64,
    pub scene: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Keep only the first `limit` records.
    pub limit: Option<usize>,
    pub correspondence: CorrespondenceConfig,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory written by gen-synth.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Record container to write (the manifest goes beside it).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of cloud points drawn as patch centers.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
}

pub fn gen_data(a: GenDataArgs, g: Globals) -> Result<Outcome> {
    let mut run: DataRun = config::load(a.config.as_deref())?;
    overlay!(run, a; scene, out, limit);
    overlay!(run, g; seed);
    if let Some(n) = a.samples {
        run.correspondence.num_samples = n;
    }
    run.correspondence.seed = run.seed;
    let scene_dir = require(&run.scene, "--scene")?;
    let out = require(&run.out, "--out")?;
    config::snapshot(out, false, &run)?;
    let scene = load_scene(scene_dir)?;
    let (mut records, manifest) = generate_correspondences(&scene, &run.correspondence)?;
    if let Some(n) = run.limit {
        records.truncate(n);
    }
    save_records(out, &records)?;
    let manifest_path = config::sibling(out, ".manifest.json");
    config::write_json(&manifest_path, &manifest)?;
    Ok(json!({
        "records": records.len(),
        "points_with_records": manifest.points_with_records,
        "skipped": manifest.skipped,
        "out": out,
        "manifest": manifest_path,
    })
    .into())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseRun {
    pub seed: u64,
    /// Record container, PPM image or scene directory.
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sigma: f64,
}

impl Default for NoiseRun {
    fn default() -> Self {
        Self {
            seed: 0,
            input: None,
            out: None,
            sigma: 0.1,
        }
    }
}

#[derive(Args, Debug)]
pub struct AddNoiseArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Standard deviation of the pixel noise, in [0, 1] intensity units.
    #[arg(long)]
    sigma: Option<f64>,
}

fn noisy_image(img: &ColorImage, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ColorImage> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(format!("noise sigma {sigma}: {e}")))?;
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for c in px.iter_mut() {
            *c = (*c as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

fn is_ppm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Records get the same per-patch perturbation bench-recall applies to
/// query patches; images and scene frames are perturbed per pixel.
pub fn add_noise(a: AddNoiseArgs, g: Globals) -> Result<Outcome> {
    let mut run: NoiseRun = config::load(a.config.as_deref())?;
    overlay!(run, a; input, out, sigma);
    overlay!(run, g; seed);
    if !(run.sigma >= 0.0 && run.sigma.is_finite()) {
        return Err(CliError::Usage(format!("--sigma must be a finite non-negative number, got {}", run.sigma)));
    }
    let input = require(&run.input, "--input")?;
    let out = require(&run.out, "--out")?;
    let rng = |i: u64| ChaCha8Rng::seed_from_u64(patch_seed(run.seed, i));
    let (kind, items) = if input.is_dir() {
        let mut scene = load_scene(input)?;
        for f in &mut scene.frames {
            f.color = noisy_image(&f.color, run.sigma, &mut rng(f.index as u64))?;
        }
        config::snapshot(out, true, &run)?;
        save_scene(out, &scene)?;
        ("scene", scene.frames.len())
    } else if is_ppm(input) {
        let img = decode_ppm(&fs::read(input)?)?;
        config::snapshot(out, false, &run)?;
        write_atomic(out, &encode_ppm(&noisy_image(&img, run.sigma, &mut rng(0))?))?;
        ("image", 1)
    } else {
        let mut records = load_records(input)?;
        for (i, r) in records.iter_mut().enumerate() {
            r.image = add_patch_noise(&r.image, run.sigma, &mut rng(i as u64))?;
        }
        config::snapshot(out, false, &run)?;
        save_records(out, &records)?;
        ("records", records.len())
    };
    Ok(json!({ "kind": kind, "items": items, "sigma": run.sigma, "out": out }).into())
}
