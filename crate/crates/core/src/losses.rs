//! Training objective: photometric reconstruction, Chamfer reconstruction,
//! triplet loss with batch-hardest negatives, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::descnet::{euclidean, Descriptor, Domain, DualAutoEncoder, ImagePatch, PointPatch};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MiningDirection {
    #[serde(rename = "2d_anchor")]
    Anchor2d,
    #[serde(rename = "3d_anchor")]
    Anchor3d,
    #[serde(rename = "symmetric")]
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: DistanceKind,
    pub mining: MiningDirection,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            distance: DistanceKind::Euclidean,
            mining: MiningDirection::Symmetric,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Which point channels the Chamfer distance sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferSpace {
    #[default]
    Full,
    CoordinatesOnly,
}

impl ChamferSpace {
    fn dims(self) -> usize {
        match self {
            ChamferSpace::Full => 6,
            ChamferSpace::CoordinatesOnly => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainMode {
    #[serde(rename = "dual")]
    Dual,
    #[serde(rename = "2d_only")]
    TwoDOnly,
    #[serde(rename = "3d_only")]
    ThreeDOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub triplet: TripletConfig,
    #[serde(default)]
    pub chamfer: ChamferSpace,
}

/// Mean squared per-pixel color error, the channel errors of one pixel
/// summed: `(1 / (W·H)) Σ ‖I_i − Ī_i‖²`.
pub fn photometric_loss(input: &ImagePatch, recon: &ImagePatch) -> Result<f64> {
    if input.size() != recon.size() {
        return Err(Error::shape(
            "photometric_loss",
            format!("{} vs {}", input.size(), recon.size()),
        ));
    }
    let pixels = input.size() * input.size();
    Ok(photometric_with_grad(input.data(), recon.data(), pixels).0)
}

/// Loss and its gradient with respect to `recon`.
pub fn photometric_with_grad<T: Scalar>(
    input: &[T],
    recon: &[T],
    pixels: usize,
) -> (f64, Vec<T>) {
    let inv = 1.0 / pixels as f64;
    let mut sum = 0.0;
    let grad = input
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = b.f64() - a.f64();
            sum += d * d;
            T::of(2.0 * d * inv)
        })
        .collect();
    (sum * inv, grad)
}

#[derive(Clone, Debug)]
pub struct ChamferEval {
    pub value: f64,
    /// Mean over `a` of the distance to its nearest point of `b`.
    pub a_to_b: f64,
    pub b_to_a: f64,
    pub nearest_in_b: Vec<usize>,
    pub nearest_in_a: Vec<usize>,
}

/// Chamfer distance between two flat point arrays with `stride` values per
/// point, comparing the first `dims` channels: the larger of the two
/// directed mean nearest-neighbor (Euclidean, not squared) distances.
/// Nearest-neighbor ties go to the lowest index.
pub fn chamfer_eval<T: Scalar>(
    a: &[T],
    b: &[T],
    stride: usize,
    dims: usize,
) -> Result<ChamferEval> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("chamfer_loss needs two non-empty sets".into()));
    }
    if a.len() % stride != 0 || b.len() % stride != 0 || dims > stride {
        return Err(Error::shape(
            "chamfer_loss",
            "point arrays are not a whole number of points",
        ));
    }
    let (na, nb) = (a.len() / stride, b.len() / stride);
    let mut best_a = vec![f64::INFINITY; na];
    let mut best_b = vec![f64::INFINITY; nb];
    let mut nearest_in_b = vec![0usize; na];
    let mut nearest_in_a = vec![0usize; nb];
    for i in 0..na {
        let p = &a[i * stride..i * stride + dims];
        for j in 0..nb {
            let q = &b[j * stride..j * stride + dims];
            let mut d2 = 0.0f64;
            for k in 0..dims {
                let d = p[k].f64() - q[k].f64();
                d2 += d * d;
            }
            if d2 < best_a[i] {
                best_a[i] = d2;
                nearest_in_b[i] = j;
            }
            if d2 < best_b[j] {
                best_b[j] = d2;
                nearest_in_a[j] = i;
            }
        }
    }
    let a_to_b = best_a.iter().map(|d| d.sqrt()).sum::<f64>() / na as f64;
    let b_to_a = best_b.iter().map(|d| d.sqrt()).sum::<f64>() / nb as f64;
    Ok(ChamferEval {
        value: a_to_b.max(b_to_a),
        a_to_b,
        b_to_a,
        nearest_in_b,
        nearest_in_a,
    })
}

pub fn chamfer_loss(p: &PointPatch, recon: &PointPatch, space: ChamferSpace) -> Result<f64> {
    Ok(chamfer_eval(&p.flat(), &recon.flat(), 6, space.dims())?.value)
}

/// Chamfer loss and its gradient with respect to the reconstruction `b`.
/// When both directed terms are equal the `a -> b` term is differentiated.
pub fn chamfer_with_grad<T: Scalar>(
    a: &[T],
    b: &[T],
    space: ChamferSpace,
) -> Result<(f64, Vec<T>)> {
    let dims = space.dims();
    let ev = chamfer_eval(a, b, 6, dims)?;
    let (na, nb) = (a.len() / 6, b.len() / 6);
    let mut grad = vec![0.0f64; b.len()];
    let push = |pi: usize, qj: usize, scale: f64, grad: &mut [f64]| {
        let p = &a[pi * 6..pi * 6 + dims];
        let q = &b[qj * 6..qj * 6 + dims];
        let dist = euclidean(p, q);
        if dist > 0.0 {
            for k in 0..dims {
                grad[qj * 6 + k] += scale * (q[k].f64() - p[k].f64()) / dist;
            }
        }
    };
    if ev.a_to_b >= ev.b_to_a {
        for (i, &j) in ev.nearest_in_b.iter().enumerate() {
            push(i, j, 1.0 / na as f64, &mut grad);
        }
    } else {
        for (j, &i) in ev.nearest_in_a.iter().enumerate() {
            push(i, j, 1.0 / nb as f64, &mut grad);
        }
    }
    Ok((ev.value, grad.into_iter().map(T::of).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    /// Domain of the anchor; positive and negative come from the other one.
    pub anchor_domain: Domain,
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

impl AsRef<[f32]> for Descriptor {
    fn as_ref(&self) -> &[f32] {
        &self.values
    }
}

fn hardest_for<T: Scalar, R: AsRef<[T]>>(
    anchors: &[R],
    others: &[R],
    domain: Domain,
) -> Vec<Triplet> {
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (j, o) in others.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = euclidean(a.as_ref(), o.as_ref());
                if d < best.0 {
                    best = (d, j);
                }
            }
            Triplet {
                anchor_domain: domain,
                anchor: i,
                positive: i,
                negative: best.1,
            }
        })
        .collect()
}

/// For each anchor `i` the positive is the aligned item `i` of the other
/// domain and the negative is the closest non-aligned item of the other
/// domain (lowest index on ties). Symmetric mining lists the image-anchored
/// triplets first.
pub fn mine_hardest_negatives<T: Scalar, R: AsRef<[T]>>(
    d2d: &[R],
    d3d: &[R],
    cfg: &TripletConfig,
) -> Result<Vec<Triplet>> {
    if d2d.len() != d3d.len() {
        return Err(Error::shape(
            "mine_hardest_negatives",
            format!("{} image vs {} point descriptors", d2d.len(), d3d.len()),
        ));
    }
    if d2d.len() < 2 {
        return Err(Error::InvalidArgument(
            "hard negative mining needs a batch of at least 2".into(),
        ));
    }
    let dim = d2d[0].as_ref().len();
    if d2d.iter().chain(d3d).any(|r| r.as_ref().len() != dim) {
        return Err(Error::shape(
            "mine_hardest_negatives",
            "descriptor dimensions differ",
        ));
    }
    let mut out = Vec::new();
    if matches!(
        cfg.mining,
        MiningDirection::Anchor2d | MiningDirection::Symmetric
    ) {
        out.extend(hardest_for(d2d, d3d, Domain::From2d));
    }
    if matches!(
        cfg.mining,
        MiningDirection::Anchor3d | MiningDirection::Symmetric
    ) {
        out.extend(hardest_for(d3d, d2d, Domain::From3d));
    }
    Ok(out)
}

/// `max(F(a, p) − F(a, n) + m, 0)` with Euclidean `F`.
pub fn triplet_loss<T: Scalar>(a: &[T], p: &[T], n: &[T], margin: f64) -> Result<f64> {
    if a.len() != p.len() || a.len() != n.len() {
        return Err(Error::shape(
            "triplet_loss",
            format!("dimensions {}, {}, {}", a.len(), p.len(), n.len()),
        ));
    }
    Ok((euclidean(a, p) - euclidean(a, n) + margin).max(0.0))
}

/// Loss and gradients with respect to anchor, positive and negative.
pub fn triplet_with_grad(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let dap = euclidean(a, p);
    let dan = euclidean(a, n);
    let loss = dap - dan + margin;
    let k = a.len();
    let (mut ga, mut gp, mut gn) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
    if loss <= 0.0 {
        return (0.0, ga, gp, gn);
    }
    for i in 0..k {
        if dap > 0.0 {
            let u = (a[i] - p[i]) / dap;
            ga[i] += u;
            gp[i] -= u;
        }
        if dan > 0.0 {
            let v = (a[i] - n[i]) / dan;
            ga[i] -= v;
            gn[i] += v;
        }
    }
    (loss, ga, gp, gn)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub chamfer: f64,
    pub triplet: f64,
    pub total: f64,
}

/// Mean triplet loss of the mined triplets and the gradients with respect
/// to both descriptor batches.
fn triplet_batch<T: Scalar>(
    d2: &Tensor<T>,
    d3: &Tensor<T>,
    cfg: &TripletConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let b = d2.batch();
    let rows2: Vec<Vec<f64>> = (0..b)
        .map(|i| d2.row(i).iter().map(|v| v.f64()).collect())
        .collect();
    let rows3: Vec<Vec<f64>> = (0..b)
        .map(|i| d3.row(i).iter().map(|v| v.f64()).collect())
        .collect();
    let triplets = mine_hardest_negatives(&rows2, &rows3, cfg)?;
    let dim = rows2[0].len();
    let mut g2 = vec![0.0; b * dim];
    let mut g3 = vec![0.0; b * dim];
    let mut total = 0.0;
    let scale = 1.0 / triplets.len() as f64;
    for t in &triplets {
        let (anchors, others, ga_buf, go_buf) = match t.anchor_domain {
            Domain::From2d => (&rows2, &rows3, &mut g2, &mut g3),
            Domain::From3d => (&rows3, &rows2, &mut g3, &mut g2),
        };
        let (l, ga, gp, gn) = triplet_with_grad(
            &anchors[t.anchor],
            &others[t.positive],
            &others[t.negative],
            cfg.margin,
        );
        total += l;
        for k in 0..dim {
            ga_buf[t.anchor * dim + k] += scale * ga[k];
            go_buf[t.positive * dim + k] += scale * gp[k];
            go_buf[t.negative * dim + k] += scale * gn[k];
        }
    }
    Ok((total * scale, g2, g3))
}

fn scaled<T: Scalar>(shape: &[usize], g: Vec<f64>, s: f64) -> Result<Tensor<T>> {
    Tensor::new(shape, g.into_iter().map(|v| T::of(v * s)).collect())
}

/// Forward and backward pass of the weighted objective on one aligned
/// mini-batch. Each term is the batch mean; gradients are accumulated into
/// `model.params`. Single-domain modes touch only their own branch.
pub fn combined_loss<T: Scalar>(
    model: &mut DualAutoEncoder<T>,
    images: &[&ImagePatch],
    points: &[&PointPatch],
    cfg: &LossConfig,
    mode: TrainMode,
) -> Result<LossBreakdown> {
    cfg.weights.validate()?;
    cfg.triplet.validate()?;
    let w = cfg.weights;
    let use2 = mode != TrainMode::ThreeDOnly;
    let use3 = mode != TrainMode::TwoDOnly;
    if use2 && images.is_empty() || use3 && points.is_empty() {
        return Err(Error::Empty("combined_loss batch".into()));
    }
    if mode == TrainMode::Dual {
        if images.len() != points.len() {
            return Err(Error::shape(
                "combined_loss",
                format!("{} images vs {} point sets", images.len(), points.len()),
            ));
        }
        if images.len() < 2 {
            return Err(Error::InvalidArgument(
                "dual-mode batch needs at least 2 pairs".into(),
            ));
        }
    }
    let cfgn = model.config.clone();
    let mut out = LossBreakdown::default();

    let mut branch2 = None;
    if use2 {
        let x = model.image_tensor(images)?;
        let (d2, c_enc) = cfgn
            .encoder_2d
            .forward(&mut model.params, &x, Mode::Train)?;
        let (rec, c_dec) = cfgn
            .decoder_2d
            .forward(&mut model.params, &d2, Mode::Train)?;
        let b = x.batch();
        let pixels = cfgn.patch_size * cfgn.patch_size;
        let mut g = Vec::with_capacity(rec.len());
        let mut sum = 0.0;
        for i in 0..b {
            let (l, gi) = photometric_with_grad(x.row(i), rec.row(i), pixels);
            sum += l;
            g.extend(gi.into_iter().map(|v| v.f64()));
        }
        out.mse = sum / b as f64;
        let g_rec: Tensor<T> = scaled(rec.shape(), g, w.alpha / b as f64)?;
        branch2 = Some((d2, c_enc, c_dec, g_rec));
    }
    let mut branch3 = None;
    if use3 {
        let x = model.point_tensor(points)?;
        let (d3, c_enc) = cfgn
            .encoder_3d
            .forward(&mut model.params, &x, Mode::Train)?;
        let (rec, c_dec) = cfgn
            .decoder_3d
            .forward(&mut model.params, &d3, Mode::Train)?;
        let b = x.batch();
        let mut g = Vec::with_capacity(rec.len());
        let mut sum = 0.0;
        for i in 0..b {
            let (l, gi) = chamfer_with_grad(x.row(i), rec.row(i), cfg.chamfer)?;
            sum += l;
            g.extend(gi.into_iter().map(|v| v.f64()));
        }
        out.chamfer = sum / b as f64;
        let g_rec: Tensor<T> = scaled(rec.shape(), g, w.beta / b as f64)?;
        branch3 = Some((d3, c_enc, c_dec, g_rec));
    }

    let mut trip_grads = None;
    if let (Some(b2), Some(b3)) = (&branch2, &branch3) {
        let (l, g2, g3) = triplet_batch(&b2.0, &b3.0, &cfg.triplet)?;
        out.triplet = l;
        trip_grads = Some((g2, g3));
    }
    out.total = w.alpha * out.mse + w.beta * out.chamfer + w.gamma * out.triplet;

    if let Some((d2, c_enc, c_dec, g_rec)) = branch2 {
        let mut g_d = if w.alpha > 0.0 {
            cfgn.decoder_2d
                .backward(&mut model.params, &c_dec, &g_rec)?
        } else {
            Tensor::zeros(d2.shape())
        };
        if let Some((g2, _)) = &trip_grads {
            if w.gamma > 0.0 {
                g_d.add_assign(&scaled(d2.shape(), g2.clone(), w.gamma)?)?;
            }
        }
        if w.alpha > 0.0 || w.gamma > 0.0 {
            cfgn.encoder_2d.backward(&mut model.params, &c_enc, &g_d)?;
        }
    }
    if let Some((d3, c_enc, c_dec, g_rec)) = branch3 {
        let mut g_d = if w.beta > 0.0 {
            cfgn.decoder_3d
                .backward(&mut model.params, &c_dec, &g_rec)?
        } else {
            Tensor::zeros(d3.shape())
        };
        if let Some((_, g3)) = &trip_grads {
            if w.gamma > 0.0 {
                g_d.add_assign(&scaled(d3.shape(), g3.clone(), w.gamma)?)?;
            }
        }
        if w.beta > 0.0 || w.gamma > 0.0 {
            cfgn.encoder_3d.backward(&mut model.params, &c_enc, &g_d)?;
        }
    }
    if !out.total.is_finite() {
        return Err(Error::NonFinite(format!("combined loss {out:?}")));
    }
    Ok(out)
}
