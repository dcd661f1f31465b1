//! Mini-batch SGD over correspondence records, with checkpoints, a JSON
//! lines loss log and single-branch ablation modes.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{patch_seed, CorrespondenceRecord};
use crate::descnet::{euclidean, Descriptor, DualAutoEncoder, ImagePatch, PointPatch};
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, JsonLines};
use crate::losses::{combined_loss, ChamferSpace, LossConfig, LossWeights, TrainMode, TripletConfig};
use crate::params::Sgd;

pub const DEFAULT_CHECKPOINT_EVERY: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub chamfer: ChamferSpace,
    pub mode: TrainMode,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.0,
            epochs: 250,
            batch_size: 64,
            seed: 0,
            weights: LossWeights::default(),
            triplet: TripletConfig::default(),
            chamfer: ChamferSpace::Full,
            mode: TrainMode::Dual,
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.epochs == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument("epochs and checkpoint_every must be at least 1".into()));
        }
        let min_batch = if self.mode == TrainMode::Dual { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidArgument(format!(
                "batch_size must be at least {min_batch} in {:?} mode",
                self.mode
            )));
        }
        self.weights.validate()?;
        self.triplet.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: self.weights,
            triplet: self.triplet,
            chamfer: self.chamfer,
        }
    }
}

/// Epoch means of each loss term, weighted by batch size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub chamfer: f64,
    pub triplet: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Fixed record order of epoch `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(patch_seed(seed ^ 0x7261_696e, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Consecutive batches of `order`; in dual mode a trailing single record is
/// folded into the previous batch because triplet mining needs a negative.
fn batches(order: &[usize], size: usize, mode: TrainMode) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if mode == TrainMode::Dual && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let k = out.len() - 1;
        let start = k * size;
        out[k] = &order[start..];
    }
    out
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_e{epoch:04}.lcdw")
}

fn check_records(model: &DualAutoEncoder<f32>, records: &[CorrespondenceRecord], cfg: &TrainConfig) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if cfg.mode == TrainMode::Dual && records.len() < 2 {
        return Err(Error::InvalidArgument("dual-mode training needs at least 2 records".into()));
    }
    let (s, n) = (model.config.patch_size, model.config.num_points);
    if let Some(r) = records.iter().find(|r| r.image.size() != s || r.points.len() != n) {
        return Err(Error::shape(
            "training record",
            format!(
                "patch {} / {} points, model expects {s} / {n}",
                r.image.size(),
                r.points.len()
            ),
        ));
    }
    Ok(())
}

/// Trains `model` in place. With `out_dir`, writes `train_log.jsonl`, a
/// checkpoint every `checkpoint_every` epochs and `final.lcdw`.
pub fn train(
    model: &mut DualAutoEncoder<f32>,
    records: &[CorrespondenceRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    train_with(model, records, cfg, out_dir, |_| {})
}

/// [`train`] with a callback after each epoch.
pub fn train_with(
    model: &mut DualAutoEncoder<f32>,
    records: &[CorrespondenceRecord],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_records(model, records, cfg)?;
    let start = Instant::now();
    let loss_cfg = cfg.loss_config();
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(JsonLines::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        checkpoints: Vec::new(),
        final_checkpoint: None,
        wall_clock_s: 0.0,
    };
    model.params.zero_grad();
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(records.len(), cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        for (b, idx) in batches(&order, cfg.batch_size, cfg.mode).into_iter().enumerate() {
            let images: Vec<&ImagePatch> = idx.iter().map(|&i| &records[i].image).collect();
            let points: Vec<&PointPatch> = idx.iter().map(|&i| &records[i].points).collect();
            let l = combined_loss(model, &images, &points, &loss_cfg, cfg.mode).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            if !l.total.is_finite() {
                model.params.zero_grad();
                return Err(Error::NonFinite(format!("loss {} at epoch {epoch}, batch {b}", l.total)));
            }
            opt.step(&mut model.params).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            let w = idx.len() as f64;
            for (s, v) in sums.iter_mut().zip([l.mse, l.chamfer, l.triplet, l.total]) {
                *s += w * v;
            }
        }
        let n = records.len() as f64;
        let entry = EpochLog {
            epoch,
            mse: sums[0] / n,
            chamfer: sums[1] / n,
            triplet: sums[2] / n,
            total: sums[3] / n,
        };
        if let Some(log) = log.as_mut() {
            log.push(&entry)?;
        }
        on_epoch(&entry);
        report.epochs.push(entry);
        if let Some(dir) = out_dir {
            if epoch % cfg.checkpoint_every == 0 {
                let path = dir.join(checkpoint_name(epoch));
                save_checkpoint(&path, model, epoch as u64)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.lcdw");
        save_checkpoint(&path, model, cfg.epochs as u64)?;
        report.final_checkpoint = Some(path);
    }
    report.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Index of the nearest candidate, ties to the lowest index.
pub fn nearest(query: &Descriptor, candidates: &[Descriptor]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in candidates.iter().enumerate() {
        let d = euclidean(&query.values, &c.values);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Fraction of records whose 2D descriptor has, as its nearest 3D
/// descriptor, one taken from the same 3D point.
pub fn evaluate_matching_accuracy(model: &DualAutoEncoder<f32>, records: &[CorrespondenceRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let images: Vec<ImagePatch> = records.iter().map(|r| r.image.clone()).collect();
    let points: Vec<PointPatch> = records.iter().map(|r| r.points.clone()).collect();
    let d2 = model.encode_2d_batch(&images)?;
    let d3 = model.encode_3d_batch(&points)?;
    let hits = d2
        .iter()
        .enumerate()
        .filter(|(i, d)| {
            let j = nearest(d, &d3);
            let (a, b) = (&records[*i], &records[j]);
            a.scene == b.scene && a.point_id == b.point_id
        })
        .count();
    Ok(hits as f64 / records.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descnet::NetworkConfig;

    fn tiny_model(seed: u64) -> DualAutoEncoder<f32> {
        DualAutoEncoder::new(NetworkConfig::build(8, 16, 8, &[4, 8], &[8, 16], &[32], seed)).unwrap()
    }

    fn tiny_records(n: usize, seed: u64) -> Vec<CorrespondenceRecord> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
                let g: f32 = rng.random_range(-0.05..0.05);
                let image = ImagePatch::from_fn(8, |x, y| c.map(|v| (v + g * (x as f32 - y as f32)).clamp(0.0, 1.0))).unwrap();
                let points = PointPatch::new(
                    (0..16)
                        .map(|_| {
                            let p: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
                            [p[0], p[1], p[2], c[0], c[1], c[2]]
                        })
                        .collect(),
                )
                .unwrap();
                CorrespondenceRecord {
                    image,
                    points,
                    scene: "t".into(),
                    frame: 0,
                    point_id: i,
                    center: [0.0; 3],
                    radius: 0.3,
                    pixel: [0.0; 2],
                }
            })
            .collect()
    }

    #[test]
    fn rejects_bad_config_and_empty_set() {
        let mut m = tiny_model(1);
        let cfg = TrainConfig {
            epochs: 1,
            ..Default::default()
        };
        assert!(matches!(train(&mut m, &[], &cfg, None), Err(Error::Empty(_))));
        for bad in [
            TrainConfig { learning_rate: 0.0, ..cfg.clone() },
            TrainConfig { epochs: 0, ..cfg.clone() },
            TrainConfig { batch_size: 1, ..cfg.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
        let ok = TrainConfig {
            batch_size: 1,
            mode: TrainMode::TwoDOnly,
            ..cfg
        };
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 4, 1));
    }

    #[test]
    fn trailing_singleton_is_merged_in_dual_mode() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4, TrainMode::Dual);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 4, TrainMode::TwoDOnly);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 4, 1]);
    }

    #[test]
    fn two_d_only_leaves_point_branch_untouched() {
        let mut m = tiny_model(2);
        let before: Vec<(String, Vec<u32>)> = m
            .params
            .params()
            .filter(|(k, _)| k.contains("3d"))
            .map(|(k, p)| (k.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        assert!(!before.is_empty());
        let recs = tiny_records(6, 1);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            mode: TrainMode::TwoDOnly,
            ..Default::default()
        };
        train(&mut m, &recs, &cfg, None).unwrap();
        for (k, bits) in before {
            let now: Vec<u32> = m.params.value(&k).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(now, bits, "{k}");
        }
    }

    #[test]
    fn writes_log_and_checkpoints_deterministically() {
        let recs = tiny_records(8, 2);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 4,
            checkpoint_every: 2,
            ..Default::default()
        };
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let mut m = tiny_model(5);
            let rep = train(&mut m, &recs, &cfg, Some(dir.path())).unwrap();
            assert_eq!(rep.epochs.len(), 4);
            assert_eq!(rep.checkpoints.len(), 2);
            let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
            assert_eq!(log.lines().count(), 4);
            let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
            for key in ["epoch", "mse", "chamfer", "triplet", "total"] {
                assert!(first.get(key).is_some(), "{key}");
            }
            (std::fs::read(dir.path().join("final.lcdw")).unwrap(), log)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_pair_accuracy_is_one() {
        let mut m = tiny_model(3);
        let calib = tiny_records(4, 8);
        let images: Vec<ImagePatch> = calib.iter().map(|r| r.image.clone()).collect();
        let points: Vec<PointPatch> = calib.iter().map(|r| r.points.clone()).collect();
        m.calibrate_batchnorm(&images, &points, 4).unwrap();
        let recs = tiny_records(1, 9);
        assert_eq!(evaluate_matching_accuracy(&m, &recs).unwrap(), 1.0);
        assert!(evaluate_matching_accuracy(&m, &[]).is_err());
    }
}
