//! The dual auto-encoder: an image branch (conv encoder, deconv decoder)
//! and a point branch (per-point MLP with max-pool encoder, MLP decoder)
//! that share one descriptor space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Mode, Sequential};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const REFERENCE_PATCH_SIZE: usize = 64;
pub const REFERENCE_NUM_POINTS: usize = 1024;
pub const REFERENCE_DIM: usize = 256;

/// Square RGB patch, stored channel-major (`[3, size, size]`), values in
/// `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatch {
    size: usize,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 || data.len() != 3 * size * size {
            return Err(Error::shape(
                "image patch",
                format!("{} values for a {size}x{size}x3 patch", data.len()),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "image patch value {v} outside [0, 1]"
            )));
        }
        Ok(Self { size, data })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let px = f(x, y);
                for c in 0..3 {
                    data[(c * size + y) * size + x] = px[c];
                }
            }
        }
        Self::new(size, data)
    }

    pub fn constant(size: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(size, |_, _| rgb)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let s = self.size;
        [
            self.data[y * s + x],
            self.data[(s + y) * s + x],
            self.data[(2 * s + y) * s + x],
        ]
    }
}

/// `N` colored points `(x, y, z, r, g, b)` in patch-local units.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPatch {
    points: Vec<[f32; 6]>,
}

impl PointPatch {
    /// Coordinates must lie in `[-1, 1]` and colors in `[0, 1]`.
    pub fn new(points: Vec<[f32; 6]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("point patch".into()));
        }
        for p in &points {
            if p[..3].iter().any(|v| !(-1.0..=1.0).contains(v))
                || p[3..].iter().any(|v| !(0.0..=1.0).contains(v))
            {
                return Err(Error::InvalidArgument(format!(
                    "point {p:?} outside the normalized patch ranges"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 6]] {
        &self.points
    }

    pub fn flat(&self) -> Vec<f32> {
        self.points.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    From2d,
    From3d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub domain: Domain,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        euclidean(&self.values, &other.values)
    }
}

/// Euclidean distance accumulated in f64.
pub fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.f64() - y.f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub descriptor_dim: usize,
    pub num_points: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub encoder_2d: Sequential,
    pub decoder_2d: Sequential,
    pub encoder_3d: Sequential,
    pub decoder_3d: Sequential,
}

impl NetworkConfig {
    /// 64x64 patches, four stride-2 convolutions (32, 64, 128, 256
    /// channels), per-point MLP 64-128-256 and decoder MLP 512-1024.
    pub fn reference(descriptor_dim: usize, num_points: usize, seed: u64) -> Self {
        Self::build(
            descriptor_dim,
            num_points,
            REFERENCE_PATCH_SIZE,
            &[32, 64, 128, 256],
            &[64, 128, 256],
            &[512, 1024],
            seed,
        )
    }

    /// Conv/deconv auto-encoder halving `patch_size` once per entry of
    /// `conv_widths`, PointNet-style point branch.
    pub fn build(
        descriptor_dim: usize,
        num_points: usize,
        patch_size: usize,
        conv_widths: &[usize],
        point_widths: &[usize],
        point_decoder_widths: &[usize],
        seed: u64,
    ) -> Self {
        let d = descriptor_dim;
        let levels = conv_widths.len();
        let bottom = (patch_size >> levels).max(1);
        let last = *conv_widths.last().unwrap_or(&3);

        let mut enc2d = Vec::new();
        let mut ch = 3;
        for &w in conv_widths {
            enc2d.push(LayerSpec::conv(ch, 3, w, 2, 1));
            enc2d.push(LayerSpec::Relu);
            enc2d.push(LayerSpec::Batchnorm {
                channels: w,
                channel_axis: 1,
            });
            ch = w;
        }
        let flat = last * bottom * bottom;
        enc2d.push(LayerSpec::Reshape { shape: vec![flat] });
        enc2d.push(LayerSpec::linear(flat, d));

        let mut dec2d = vec![
            LayerSpec::linear(d, flat),
            LayerSpec::Reshape {
                shape: vec![last, bottom, bottom],
            },
            LayerSpec::Relu,
            LayerSpec::Batchnorm {
                channels: last,
                channel_axis: 1,
            },
        ];
        let mut ch = last;
        for (i, &w) in conv_widths
            .iter()
            .rev()
            .skip(1)
            .chain(std::iter::once(&3))
            .enumerate()
        {
            dec2d.push(LayerSpec::deconv(ch, 4, w, 2, 1));
            if i + 1 < levels {
                dec2d.push(LayerSpec::Relu);
                dec2d.push(LayerSpec::Batchnorm {
                    channels: w,
                    channel_axis: 1,
                });
            }
            ch = w;
        }
        dec2d.push(LayerSpec::Sigmoid);

        let mut enc3d = Vec::new();
        let mut ch = 6;
        for &w in point_widths {
            enc3d.push(LayerSpec::linear(ch, w));
            enc3d.push(LayerSpec::Relu);
            enc3d.push(LayerSpec::Batchnorm {
                channels: w,
                channel_axis: 2,
            });
            ch = w;
        }
        enc3d.push(LayerSpec::MaxpoolRows);
        enc3d.push(LayerSpec::linear(ch, d));

        let mut dec3d = Vec::new();
        let mut ch = d;
        for &w in point_decoder_widths {
            dec3d.push(LayerSpec::linear(ch, w));
            dec3d.push(LayerSpec::Relu);
            dec3d.push(LayerSpec::Batchnorm {
                channels: w,
                channel_axis: 1,
            });
            ch = w;
        }
        dec3d.push(LayerSpec::linear(ch, num_points * 6));
        dec3d.push(LayerSpec::Reshape {
            shape: vec![num_points, 6],
        });
        dec3d.push(LayerSpec::PointOutput);

        Self {
            descriptor_dim: d,
            num_points,
            patch_size,
            seed,
            encoder_2d: Sequential::new("enc2d", enc2d),
            decoder_2d: Sequential::new("dec2d", dec2d),
            encoder_3d: Sequential::new("enc3d", enc3d),
            decoder_3d: Sequential::new("dec3d", dec3d),
        }
    }

    /// Shape contract check by a dry run on two zero inputs.
    pub fn validate(&self) -> Result<()> {
        if self.descriptor_dim == 0 || self.num_points == 0 || self.patch_size == 0 {
            return Err(Error::InvalidArgument(
                "descriptor_dim, num_points and patch_size must be positive".into(),
            ));
        }
        for s in [
            &self.encoder_2d,
            &self.decoder_2d,
            &self.encoder_3d,
            &self.decoder_3d,
        ] {
            s.validate()?;
        }
        let mut store = ParamStore::<f32>::new(0);
        for s in [
            &self.encoder_2d,
            &self.decoder_2d,
            &self.encoder_3d,
            &self.decoder_3d,
        ] {
            s.init_params(&mut store);
        }
        let p = self.patch_size;
        let img = Tensor::<f32>::zeros(&[2, 3, p, p]);
        let (d2, _) = self.encoder_2d.forward(&mut store, &img, Mode::Train)?;
        self.expect(d2.shape(), &[2, self.descriptor_dim], "2D encoder output")?;
        let (r2, _) = self.decoder_2d.forward(&mut store, &d2, Mode::Train)?;
        self.expect(r2.shape(), img.shape(), "2D decoder output")?;
        let pts = Tensor::<f32>::zeros(&[2, self.num_points, 6]);
        let (d3, _) = self.encoder_3d.forward(&mut store, &pts, Mode::Train)?;
        self.expect(d3.shape(), &[2, self.descriptor_dim], "3D encoder output")?;
        let (r3, _) = self.decoder_3d.forward(&mut store, &d3, Mode::Train)?;
        self.expect(r3.shape(), pts.shape(), "3D decoder output")
    }

    fn expect(&self, got: &[usize], want: &[usize], what: &str) -> Result<()> {
        if got != want {
            return Err(Error::shape(
                "network config",
                format!("{what} is {got:?}, expected {want:?}"),
            ));
        }
        Ok(())
    }
}

/// Eval-mode inference batch size.
const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug)]
pub struct DualAutoEncoder<T = f32> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> DualAutoEncoder<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(config.seed);
        for s in [
            &config.encoder_2d,
            &config.decoder_2d,
            &config.encoder_3d,
            &config.decoder_3d,
        ] {
            s.init_params(&mut params);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: NetworkConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let fresh = Self::new(config.clone())?;
        for (name, p) in fresh.params.params() {
            let got = params.get(name)?;
            if got.value.shape() != p.value.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", got.value.shape(), p.value.shape()),
                ));
            }
        }
        Ok(Self { config, params })
    }

    pub fn dim(&self) -> usize {
        self.config.descriptor_dim
    }

    pub fn cast<U: Scalar>(&self) -> DualAutoEncoder<U> {
        DualAutoEncoder {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn image_tensor(&self, patches: &[&ImagePatch]) -> Result<Tensor<T>> {
        let p = self.config.patch_size;
        let mut data = Vec::with_capacity(patches.len() * 3 * p * p);
        for patch in patches {
            if patch.size() != p {
                return Err(Error::shape(
                    "encode_2d",
                    format!("patch is {0}x{0}, network expects {p}x{p}", patch.size()),
                ));
            }
            data.extend(patch.data().iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[patches.len(), 3, p, p], data)
    }

    pub fn point_tensor(&self, patches: &[&PointPatch]) -> Result<Tensor<T>> {
        let n = self.config.num_points;
        let mut data = Vec::with_capacity(patches.len() * n * 6);
        for patch in patches {
            if patch.len() != n {
                return Err(Error::shape(
                    "encode_3d",
                    format!("patch has {} points, network expects {n}", patch.len()),
                ));
            }
            data.extend(patch.points().iter().flatten().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[patches.len(), n, 6], data)
    }

    pub fn descriptor_tensor(&self, ds: &[&Descriptor]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut data = Vec::with_capacity(ds.len() * d);
        for desc in ds {
            if desc.dim() != d {
                return Err(Error::shape(
                    "decode",
                    format!("descriptor has {} values, network expects {d}", desc.dim()),
                ));
            }
            data.extend(desc.values.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[ds.len(), d], data)
    }

    fn to_descriptors(t: &Tensor<T>, domain: Domain) -> Vec<Descriptor> {
        (0..t.batch())
            .map(|i| Descriptor {
                values: t.row(i).iter().map(|v| v.f64() as f32).collect(),
                domain,
            })
            .collect()
    }

    fn chunked<I: Sync, O: Send>(
        &self,
        items: &[I],
        f: impl Fn(&[I]) -> Result<Vec<O>> + Sync + Send,
    ) -> Result<Vec<O>> {
        let parts: Vec<Result<Vec<O>>> = items.par_chunks(INFER_CHUNK).map(f).collect();
        let mut out = Vec::with_capacity(items.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    pub fn encode_2d(&self, patch: &ImagePatch) -> Result<Descriptor> {
        Ok(self.encode_2d_batch(std::slice::from_ref(patch))?.remove(0))
    }

    /// Eval-mode encoding; chunks may run on worker threads but results
    /// are returned in input order.
    pub fn encode_2d_batch(&self, patches: &[ImagePatch]) -> Result<Vec<Descriptor>> {
        self.chunked(patches, |chunk| {
            let refs: Vec<&ImagePatch> = chunk.iter().collect();
            let x = self.image_tensor(&refs)?;
            let y = self.config.encoder_2d.infer(&self.params, &x)?;
            Ok(Self::to_descriptors(&y, Domain::From2d))
        })
    }

    pub fn encode_3d(&self, points: &PointPatch) -> Result<Descriptor> {
        Ok(self
            .encode_3d_batch(std::slice::from_ref(points))?
            .remove(0))
    }

    pub fn encode_3d_batch(&self, patches: &[PointPatch]) -> Result<Vec<Descriptor>> {
        self.chunked(patches, |chunk| {
            let refs: Vec<&PointPatch> = chunk.iter().collect();
            let x = self.point_tensor(&refs)?;
            let y = self.config.encoder_3d.infer(&self.params, &x)?;
            Ok(Self::to_descriptors(&y, Domain::From3d))
        })
    }

    pub fn decode_2d(&self, d: &Descriptor) -> Result<ImagePatch> {
        Ok(self.decode_2d_batch(std::slice::from_ref(d))?.remove(0))
    }

    pub fn decode_2d_batch(&self, ds: &[Descriptor]) -> Result<Vec<ImagePatch>> {
        let p = self.config.patch_size;
        self.chunked(ds, |chunk| {
            let refs: Vec<&Descriptor> = chunk.iter().collect();
            let x = self.descriptor_tensor(&refs)?;
            let y = self.config.decoder_2d.infer(&self.params, &x)?;
            (0..y.batch())
                .map(|i| {
                    let data = y
                        .row(i)
                        .iter()
                        .map(|v| (v.f64() as f32).clamp(0.0, 1.0))
                        .collect();
                    ImagePatch::new(p, data)
                })
                .collect()
        })
    }

    pub fn decode_3d(&self, d: &Descriptor) -> Result<PointPatch> {
        Ok(self.decode_3d_batch(std::slice::from_ref(d))?.remove(0))
    }

    pub fn decode_3d_batch(&self, ds: &[Descriptor]) -> Result<Vec<PointPatch>> {
        self.chunked(ds, |chunk| {
            let refs: Vec<&Descriptor> = chunk.iter().collect();
            let x = self.descriptor_tensor(&refs)?;
            let y = self.config.decoder_3d.infer(&self.params, &x)?;
            (0..y.batch())
                .map(|i| {
                    let pts = y
                        .row(i)
                        .chunks(6)
                        .map(|c| {
                            let mut p = [0f32; 6];
                            for j in 0..6 {
                                let lo = if j < 3 { -1.0 } else { 0.0 };
                                p[j] = (c[j].f64() as f32).clamp(lo, 1.0);
                            }
                            p
                        })
                        .collect();
                    PointPatch::new(pts)
                })
                .collect()
        })
    }

    /// Train-mode forward passes (no gradients) so that every batchnorm
    /// layer has running statistics. Used before evaluating untrained
    /// networks.
    pub fn calibrate_batchnorm(
        &mut self,
        images: &[ImagePatch],
        points: &[PointPatch],
        batch_size: usize,
    ) -> Result<()> {
        let bs = batch_size.max(2);
        for chunk in images.chunks(bs) {
            let refs: Vec<&ImagePatch> = chunk.iter().collect();
            let x = self.image_tensor(&refs)?;
            let (d, _) = self
                .config
                .encoder_2d
                .forward(&mut self.params, &x, Mode::Train)?;
            self.config
                .decoder_2d
                .forward(&mut self.params, &d, Mode::Train)?;
        }
        for chunk in points.chunks(bs) {
            let refs: Vec<&PointPatch> = chunk.iter().collect();
            let x = self.point_tensor(&refs)?;
            let (d, _) = self
                .config
                .encoder_3d
                .forward(&mut self.params, &x, Mode::Train)?;
            self.config
                .decoder_3d
                .forward(&mut self.params, &d, Mode::Train)?;
        }
        Ok(())
    }
}
