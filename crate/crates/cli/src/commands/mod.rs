pub mod data;
pub mod depth;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod places;

use std::fs;
use std::path::{Path, PathBuf};

use crossdesc_core::datagen::{PointCloud, Pose};
use crossdesc_core::descnet::DualAutoEncoder;
use crossdesc_core::geomatch::FragmentPair;
use crossdesc_core::io::{load_checkpoint, read_ply, write_atomic, write_ply};
use serde::{Deserialize, Serialize};

use crate::Result;

pub fn load_model(path: &Path) -> Result<DualAutoEncoder<f32>> {
    Ok(load_checkpoint(path)?.model)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    Ok(read_ply(fs::File::open(path)?)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::new();
    write_ply(&mut buf, cloud)?;
    write_atomic(path, &buf)?;
    Ok(())
}

/// Paths inside manifests are relative to the manifest's directory.
fn resolve(manifest: &Path, p: &Path) -> PathBuf {
    match manifest.parent() {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmapEntry {
    pub id: u64,
    pub cloud: PathBuf,
    /// Camera-from-world pose of the submap's anchor frame.
    pub pose: Pose,
}

/// Place database: submap clouds with anchor poses, and a scene directory
/// of query frames.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacesManifest {
    pub submaps: Vec<SubmapEntry>,
    pub queries: PathBuf,
}

impl PlacesManifest {
    pub fn load(path: &Path) -> Result<(Vec<(u64, PointCloud, Pose)>, PathBuf)> {
        let m: PlacesManifest = crate::config::read_json(path)?;
        let submaps = m
            .submaps
            .iter()
            .map(|e| Ok((e.id, read_cloud(&resolve(path, &e.cloud))?, e.pose)))
            .collect::<Result<_>>()?;
        Ok((submaps, resolve(path, &m.queries)))
    }
}

/// Fragment clouds and the ground-truth transform of each pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsManifest {
    pub fragments: Vec<PathBuf>,
    pub pairs: Vec<FragmentPair>,
}

impl PairsManifest {
    pub fn load(path: &Path) -> Result<(Vec<PointCloud>, Vec<FragmentPair>)> {
        let m: PairsManifest = crate::config::read_json(path)?;
        let clouds = m
            .fragments
            .iter()
            .map(|p| read_cloud(&resolve(path, p)))
            .collect::<Result<_>>()?;
        Ok((clouds, m.pairs))
    }
}
