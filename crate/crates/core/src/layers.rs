//! Feed-forward layers with hand-written backward passes.
//!
//! Every forward call returns a [`Cache`] holding exactly what the matching
//! backward call needs. Convolutions use im2col followed by a GEMM. Image
//! tensors are `[batch, channels, height, width]`; point tensors are
//! `[batch, points, channels]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        kernel_size: usize,
        out_dim: usize,
        stride: usize,
        padding: usize,
    },
    Deconv2d {
        in_channels: usize,
        kernel_size: usize,
        out_dim: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    Batchnorm {
        channels: usize,
        channel_axis: usize,
    },
    MaxpoolRows,
    /// Reshape each batch item to `shape`.
    Reshape {
        shape: Vec<usize>,
    },
    Sigmoid,
    /// `tanh` on the three coordinate channels, sigmoid on the three colors.
    PointOutput,
}

impl LayerSpec {
    pub fn conv(
        in_channels: usize,
        kernel_size: usize,
        out_dim: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            kernel_size,
            out_dim,
            stride,
            padding,
        }
    }

    pub fn deconv(
        in_channels: usize,
        kernel_size: usize,
        out_dim: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec::Deconv2d {
            in_channels,
            kernel_size,
            out_dim,
            stride,
            padding,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Linear { in_dim, out_dim }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Deconv2d { .. } => "deconv2d",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::Batchnorm { .. } => "batchnorm",
            LayerSpec::MaxpoolRows => "maxpool_rows",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::PointOutput => "point_output",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{}: {what}", self.kind())));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel_size,
                out_dim,
                stride,
                ..
            }
            | LayerSpec::Deconv2d {
                in_channels,
                kernel_size,
                out_dim,
                stride,
                ..
            } => {
                if stride < 1 {
                    return bad("stride must be >= 1");
                }
                if out_dim < 1 || in_channels < 1 || kernel_size < 1 {
                    return bad("channels and kernel must be >= 1");
                }
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                if in_dim < 1 || out_dim < 1 {
                    return bad("dimensions must be >= 1");
                }
            }
            LayerSpec::Batchnorm { channels, .. } => {
                if channels < 1 {
                    return bad("channels must be >= 1");
                }
            }
            LayerSpec::Reshape { ref shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return bad("shape extents must be >= 1");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
}

impl Layer {
    pub fn new(name: impl Into<String>, spec: LayerSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Registers this layer's parameters: fan-in scaled uniform weights and
    /// biases, unit scale and zero shift for batchnorm.
    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) {
        match self.spec {
            LayerSpec::Conv2d {
                in_channels,
                kernel_size,
                out_dim,
                ..
            } => {
                let fan_in = (in_channels * kernel_size * kernel_size) as f64;
                let bound = 1.0 / fan_in.sqrt();
                store.init_uniform(
                    &self.weight_name(),
                    &[out_dim, in_channels, kernel_size, kernel_size],
                    bound,
                );
                store.init_uniform(&self.bias_name(), &[out_dim], bound);
            }
            LayerSpec::Deconv2d {
                in_channels,
                kernel_size,
                out_dim,
                stride,
                ..
            } => {
                // Each output pixel receives about in·(k/s)² contributions.
                let taps = (kernel_size * kernel_size) as f64 / (stride * stride) as f64;
                let fan_in = (in_channels as f64 * taps).max(1.0);
                let bound = 1.0 / fan_in.sqrt();
                store.init_uniform(
                    &self.weight_name(),
                    &[in_channels, out_dim, kernel_size, kernel_size],
                    bound,
                );
                store.init_uniform(&self.bias_name(), &[out_dim], bound);
            }
            LayerSpec::Linear { in_dim, out_dim } => {
                let bound = 1.0 / (in_dim as f64).sqrt();
                store.init_uniform(&self.weight_name(), &[out_dim, in_dim], bound);
                store.init_uniform(&self.bias_name(), &[out_dim], bound);
            }
            LayerSpec::Batchnorm { channels, .. } => {
                store.init_const(&self.weight_name(), &[channels], 1.0);
                store.init_const(&self.bias_name(), &[channels], 0.0);
                store.init_stats(&self.name, channels);
            }
            _ => {}
        }
    }
}

/// State saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    /// `cols` holds the im2col matrices of the batch side by side.
    Conv {
        input_shape: Vec<usize>,
        cols: Vec<T>,
        out_hw: (usize, usize),
    },
    /// `wide_x` is the input laid out as `[channels, batch * pixels]`.
    Deconv {
        input_shape: Vec<usize>,
        wide_x: Vec<T>,
        out_hw: (usize, usize),
    },
    Linear {
        input: Tensor<T>,
    },
    Relu {
        output: Tensor<T>,
    },
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        dims: (usize, usize, usize),
        mode: Mode,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
    },
    MaxPool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Reshape {
        input_shape: Vec<usize>,
    },
    Sigmoid {
        output: Tensor<T>,
    },
    PointOutput {
        output: Tensor<T>,
    },
}

impl<T> Cache<T> {
    fn kind(&self) -> &'static str {
        match self {
            Cache::Conv { .. } => "conv2d",
            Cache::Deconv { .. } => "deconv2d",
            Cache::Linear { .. } => "linear",
            Cache::Relu { .. } => "relu",
            Cache::BatchNorm { .. } => "batchnorm",
            Cache::MaxPool { .. } => "maxpool_rows",
            Cache::Reshape { .. } => "reshape",
            Cache::Sigmoid { .. } => "sigmoid",
            Cache::PointOutput { .. } => "point_output",
        }
    }
}

fn expect_ndim<T: Scalar>(layer: &Layer, x: &Tensor<T>, ndim: usize) -> Result<()> {
    if x.shape().len() != ndim {
        return Err(Error::shape(
            &layer.name,
            format!("expected {ndim}-d input, got shape {:?}", x.shape()),
        ));
    }
    Ok(())
}

fn expect_dim(layer: &Layer, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(
            &layer.name,
            format!("{what} is {got}, expected {want}"),
        ));
    }
    Ok(())
}

fn conv_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = len + 2 * p;
    (padded >= k).then(|| (padded - k) / s + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    img: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
    ld: usize,
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + npix];
                for oy in 0..ho {
                    let y = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if y < 0 || y >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[y as usize * w..(y as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let x = (ox * s + kj) as isize - p as isize;
                        *o = if x >= 0 && x < w as isize {
                            src[x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    img: &mut [T],
    ld: usize,
) {
    let npix = ho * wo;
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + npix];
                for oy in 0..ho {
                    let y = (oy * s + ki) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * w..(y as usize + 1) * w];
                    for ox in 0..wo {
                        let x = (ox * s + kj) as isize - p as isize;
                        if x >= 0 && x < w as isize {
                            dst[x as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Visits flat indices in memory order with the channel of each, for a
/// tensor viewed as `[outer, channels, inner]`.
#[inline(always)]
fn for_each_channel(len: usize, channels: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    let mut j = 0;
    while j < len {
        for c in 0..channels {
            for _ in 0..inner {
                f(j, c);
                j += 1;
            }
        }
    }
}

/// `[b, c, n]` to `[c, b * n]`.
fn channels_major<T: Scalar>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(ci * b + bi) * n..(ci * b + bi + 1) * n]
                .copy_from_slice(&x[(bi * c + ci) * n..(bi * c + ci + 1) * n]);
        }
    }
    out
}

/// Inverse of [`channels_major`].
fn batch_major<T: Scalar>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * n..(bi * c + ci + 1) * n]
                .copy_from_slice(&x[(ci * b + bi) * n..(ci * b + bi + 1) * n]);
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Runs one layer. In train mode batchnorm normalizes with batch
/// statistics (returned in the cache for the caller to fold into the
/// running estimates); in eval mode it uses the running statistics.
pub fn layer_forward<T: Scalar>(
    layer: &Layer,
    params: &ParamStore<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Cache<T>)> {
    input.ensure_finite(&format!("input of {}", layer.name))?;
    match layer.spec {
        LayerSpec::Conv2d {
            in_channels,
            kernel_size: k,
            out_dim,
            stride: s,
            padding: p,
        } => {
            expect_ndim(layer, input, 4)?;
            let (b, c, h, w) = (
                input.shape()[0],
                input.shape()[1],
                input.shape()[2],
                input.shape()[3],
            );
            expect_dim(layer, "channel dimension", c, in_channels)?;
            let (ho, wo) = match (conv_out(h, k, s, p), conv_out(w, k, s, p)) {
                (Some(ho), Some(wo)) => (ho, wo),
                _ => {
                    return Err(Error::shape(
                        &layer.name,
                        format!("spatial size {h}x{w} smaller than kernel {k}"),
                    ))
                }
            };
            let weight = params.value(&layer.weight_name())?.data();
            let bias = params.value(&layer.bias_name())?.data();
            let ckk = c * k * k;
            let npix = ho * wo;
            let ld = b * npix;
            // columns of all batch items side by side: [ckk, b * npix]
            let mut cols = vec![T::zero(); ckk * ld];
            for bi in 0..b {
                let img = &input.data()[bi * c * h * w..(bi + 1) * c * h * w];
                im2col(img, c, h, w, k, s, p, ho, wo, &mut cols[bi * npix..], ld);
            }
            let mut wide = vec![T::zero(); out_dim * ld];
            T::gemm(
                out_dim,
                ckk,
                ld,
                weight,
                ckk as isize,
                1,
                &cols,
                ld as isize,
                1,
                T::zero(),
                &mut wide,
                ld as isize,
                1,
            );
            let mut out = vec![T::zero(); b * out_dim * npix];
            for (bi, item) in out.chunks_mut(out_dim * npix).enumerate() {
                for (o, dst) in item.chunks_mut(npix).enumerate() {
                    let src = &wide[o * ld + bi * npix..o * ld + (bi + 1) * npix];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bias[o];
                    }
                }
            }
            let y = Tensor::new(&[b, out_dim, ho, wo], out)?;
            Ok((
                y,
                Cache::Conv {
                    input_shape: input.shape().to_vec(),
                    cols,
                    out_hw: (ho, wo),
                },
            ))
        }
        LayerSpec::Deconv2d {
            in_channels,
            kernel_size: k,
            out_dim,
            stride: s,
            padding: p,
        } => {
            expect_ndim(layer, input, 4)?;
            let (b, c, h, w) = (
                input.shape()[0],
                input.shape()[1],
                input.shape()[2],
                input.shape()[3],
            );
            expect_dim(layer, "channel dimension", c, in_channels)?;
            let full_h = (h - 1) * s + k;
            let full_w = (w - 1) * s + k;
            if full_h <= 2 * p || full_w <= 2 * p {
                return Err(Error::shape(
                    &layer.name,
                    "padding consumes the whole output",
                ));
            }
            let (ho, wo) = (full_h - 2 * p, full_w - 2 * p);
            let weight = params.value(&layer.weight_name())?.data();
            let bias = params.value(&layer.bias_name())?.data();
            let okk = out_dim * k * k;
            let hw = h * w;
            let ld = b * hw;
            let wide_x = channels_major(input.data(), b, c, hw);
            let mut cols = vec![T::zero(); okk * ld];
            T::gemm(
                okk,
                c,
                ld,
                weight,
                1,
                okk as isize,
                &wide_x,
                ld as isize,
                1,
                T::zero(),
                &mut cols,
                ld as isize,
                1,
            );
            let mut out = vec![T::zero(); b * out_dim * ho * wo];
            for (bi, dst) in out.chunks_mut(out_dim * ho * wo).enumerate() {
                col2im(&cols[bi * hw..], out_dim, ho, wo, k, s, p, h, w, dst, ld);
                for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bias[o]);
                }
            }
            let y = Tensor::new(&[b, out_dim, ho, wo], out)?;
            Ok((
                y,
                Cache::Deconv {
                    input_shape: input.shape().to_vec(),
                    wide_x,
                    out_hw: (ho, wo),
                },
            ))
        }
        LayerSpec::Linear { in_dim, out_dim } => {
            let last = *input.shape().last().unwrap_or(&0);
            expect_dim(layer, "feature dimension", last, in_dim)?;
            let rows = input.len() / in_dim;
            let weight = params.value(&layer.weight_name())?.data();
            let bias = params.value(&layer.bias_name())?.data();
            let mut out = vec![T::zero(); rows * out_dim];
            for chunk in out.chunks_mut(out_dim) {
                chunk.copy_from_slice(bias);
            }
            T::gemm(
                rows,
                in_dim,
                out_dim,
                input.data(),
                in_dim as isize,
                1,
                weight,
                1,
                in_dim as isize,
                T::one(),
                &mut out,
                out_dim as isize,
                1,
            );
            let mut shape = input.shape().to_vec();
            *shape.last_mut().unwrap() = out_dim;
            Ok((
                Tensor::new(&shape, out)?,
                Cache::Linear {
                    input: input.clone(),
                },
            ))
        }
        LayerSpec::Relu => {
            let mut y = input.clone();
            y.data_mut().iter_mut().for_each(|v| {
                if *v < T::zero() {
                    *v = T::zero()
                }
            });
            Ok((y.clone(), Cache::Relu { output: y }))
        }
        LayerSpec::Batchnorm {
            channels,
            channel_axis,
        } => {
            if channel_axis >= input.shape().len() {
                return Err(Error::shape(
                    &layer.name,
                    format!(
                        "channel axis {channel_axis} out of range for {:?}",
                        input.shape()
                    ),
                ));
            }
            expect_dim(
                layer,
                "channel dimension",
                input.shape()[channel_axis],
                channels,
            )?;
            let outer: usize = input.shape()[..channel_axis].iter().product();
            let inner: usize = input.shape()[channel_axis + 1..].iter().product();
            let m = outer * inner;
            let gamma = params.value(&layer.weight_name())?.data();
            let beta = params.value(&layer.bias_name())?.data();
            let x = input.data();
            let eps = T::of(BN_EPS);
            let (mean, var, batch_var) = match mode {
                Mode::Train => {
                    let mut sum = vec![0.0f64; channels];
                    for_each_channel(x.len(), channels, inner, |j, c| sum[c] += x[j].f64());
                    let mu: Vec<f64> = sum.iter().map(|s| s / m as f64).collect();
                    let mut sq = vec![0.0f64; channels];
                    for_each_channel(x.len(), channels, inner, |j, c| {
                        let d = x[j].f64() - mu[c];
                        sq[c] += d * d;
                    });
                    let mean: Vec<T> = mu.iter().map(|&v| T::of(v)).collect();
                    let var: Vec<T> = sq.iter().map(|&v| T::of(v / m as f64)).collect();
                    let unbiased = sq
                        .iter()
                        .map(|&v| {
                            T::of(if m > 1 {
                                v / (m - 1) as f64
                            } else {
                                v / m as f64
                            })
                        })
                        .collect();
                    (mean, var, unbiased)
                }
                Mode::Eval => {
                    let stats = params.stats(&layer.name)?;
                    if stats.batches == 0 {
                        return Err(Error::Unpopulated(layer.name.clone()));
                    }
                    (
                        stats.mean.data().to_vec(),
                        stats.var.data().to_vec(),
                        Vec::new(),
                    )
                }
            };
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut xhat = vec![T::zero(); x.len()];
            let mut y = vec![T::zero(); x.len()];
            for_each_channel(x.len(), channels, inner, |j, c| {
                let xh = (x[j] - mean[c]) * inv_std[c];
                xhat[j] = xh;
                y[j] = gamma[c] * xh + beta[c];
            });
            Ok((
                Tensor::new(input.shape(), y)?,
                Cache::BatchNorm {
                    xhat,
                    inv_std,
                    dims: (outer, channels, inner),
                    mode,
                    batch_mean: if mode == Mode::Train {
                        mean
                    } else {
                        Vec::new()
                    },
                    batch_var,
                },
            ))
        }
        LayerSpec::MaxpoolRows => {
            expect_ndim(layer, input, 3)?;
            let (b, n, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let x = input.data();
            let mut out = vec![T::zero(); b * c];
            let mut argmax = vec![0usize; b * c];
            for bi in 0..b {
                let base = bi * n * c;
                out[bi * c..(bi + 1) * c].copy_from_slice(&x[base..base + c]);
                for r in 1..n {
                    let row = &x[base + r * c..base + (r + 1) * c];
                    for ch in 0..c {
                        if row[ch] > out[bi * c + ch] {
                            out[bi * c + ch] = row[ch];
                            argmax[bi * c + ch] = r;
                        }
                    }
                }
            }
            Ok((
                Tensor::new(&[b, c], out)?,
                Cache::MaxPool {
                    input_shape: input.shape().to_vec(),
                    argmax,
                },
            ))
        }
        LayerSpec::Reshape { ref shape } => {
            let per_item: usize = shape.iter().product();
            let b = input.batch();
            expect_dim(layer, "per-item size", input.len() / b, per_item)?;
            let mut full = vec![b];
            full.extend_from_slice(shape);
            Ok((
                input.clone().reshape(&full)?,
                Cache::Reshape {
                    input_shape: input.shape().to_vec(),
                },
            ))
        }
        LayerSpec::Sigmoid => {
            let mut y = input.clone();
            y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            Ok((y.clone(), Cache::Sigmoid { output: y }))
        }
        LayerSpec::PointOutput => {
            let last = *input.shape().last().unwrap_or(&0);
            expect_dim(layer, "point width", last, 6)?;
            let mut y = input.clone();
            for pt in y.data_mut().chunks_mut(6) {
                for v in &mut pt[..3] {
                    *v = v.tanh();
                }
                for v in &mut pt[3..] {
                    *v = sigmoid(*v);
                }
            }
            Ok((y.clone(), Cache::PointOutput { output: y }))
        }
    }
}

fn wrong_cache<T>(layer: &Layer, cache: &Cache<T>) -> Error {
    Error::MissingCache(format!(
        "layer {} ({}) was given a {} cache",
        layer.name,
        layer.spec.kind(),
        cache.kind()
    ))
}

/// Returns the gradient with respect to the layer input and accumulates
/// parameter gradients into `params`.
pub fn layer_backward<T: Scalar>(
    layer: &Layer,
    params: &mut ParamStore<T>,
    cache: &Cache<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    match (&layer.spec, cache) {
        (
            &LayerSpec::Conv2d {
                kernel_size: k,
                out_dim,
                stride: s,
                padding: p,
                ..
            },
            Cache::Conv {
                input_shape,
                cols,
                out_hw: (ho, wo),
            },
        ) => {
            let (b, c, h, w) = (
                input_shape[0],
                input_shape[1],
                input_shape[2],
                input_shape[3],
            );
            check_upstream(layer, upstream, &[b, out_dim, *ho, *wo])?;
            let ckk = c * k * k;
            let npix = ho * wo;
            let ld = b * npix;
            let weight = params.value(&layer.weight_name())?.data().to_vec();
            let wide_dy = channels_major(upstream.data(), b, out_dim, npix);
            let db: Vec<T> = wide_dy
                .chunks(ld)
                .map(|r| r.iter().copied().sum::<T>())
                .collect();
            let mut dw = vec![T::zero(); out_dim * ckk];
            T::gemm(
                out_dim,
                ld,
                ckk,
                &wide_dy,
                ld as isize,
                1,
                cols,
                1,
                ld as isize,
                T::zero(),
                &mut dw,
                ckk as isize,
                1,
            );
            let mut dcols = vec![T::zero(); ckk * ld];
            T::gemm(
                ckk,
                out_dim,
                ld,
                &weight,
                1,
                ckk as isize,
                &wide_dy,
                ld as isize,
                1,
                T::zero(),
                &mut dcols,
                ld as isize,
                1,
            );
            let mut dx = vec![T::zero(); b * c * h * w];
            for (bi, dst) in dx.chunks_mut(c * h * w).enumerate() {
                col2im(&dcols[bi * npix..], c, h, w, k, s, p, *ho, *wo, dst, ld);
            }
            accumulate(params, &layer.weight_name(), &dw)?;
            accumulate(params, &layer.bias_name(), &db)?;
            Tensor::new(input_shape, dx)
        }
        (
            &LayerSpec::Deconv2d {
                kernel_size: k,
                out_dim,
                stride: s,
                padding: p,
                ..
            },
            Cache::Deconv {
                input_shape,
                wide_x,
                out_hw: (ho, wo),
            },
        ) => {
            let (b, c, h, w) = (
                input_shape[0],
                input_shape[1],
                input_shape[2],
                input_shape[3],
            );
            check_upstream(layer, upstream, &[b, out_dim, *ho, *wo])?;
            let okk = out_dim * k * k;
            let hw = h * w;
            let ld = b * hw;
            let weight = params.value(&layer.weight_name())?.data().to_vec();
            let mut db = vec![T::zero(); out_dim];
            let mut dcols = vec![T::zero(); okk * ld];
            for (bi, dy) in upstream.data().chunks(out_dim * ho * wo).enumerate() {
                im2col(
                    dy,
                    out_dim,
                    *ho,
                    *wo,
                    k,
                    s,
                    p,
                    h,
                    w,
                    &mut dcols[bi * hw..],
                    ld,
                );
                for (o, chunk) in dy.chunks(ho * wo).enumerate() {
                    db[o] += chunk.iter().copied().sum::<T>();
                }
            }
            let mut wide_dx = vec![T::zero(); c * ld];
            T::gemm(
                c,
                okk,
                ld,
                &weight,
                okk as isize,
                1,
                &dcols,
                ld as isize,
                1,
                T::zero(),
                &mut wide_dx,
                ld as isize,
                1,
            );
            let mut dw = vec![T::zero(); c * okk];
            T::gemm(
                c,
                ld,
                okk,
                wide_x,
                ld as isize,
                1,
                &dcols,
                1,
                ld as isize,
                T::zero(),
                &mut dw,
                okk as isize,
                1,
            );
            let dx = batch_major(&wide_dx, b, c, hw);
            accumulate(params, &layer.weight_name(), &dw)?;
            accumulate(params, &layer.bias_name(), &db)?;
            Tensor::new(input_shape, dx)
        }
        (&LayerSpec::Linear { in_dim, out_dim }, Cache::Linear { input }) => {
            let mut want = input.shape().to_vec();
            *want.last_mut().unwrap() = out_dim;
            check_upstream(layer, upstream, &want)?;
            let rows = input.len() / in_dim;
            let weight = params.value(&layer.weight_name())?.data().to_vec();
            let mut dx = vec![T::zero(); rows * in_dim];
            T::gemm(
                rows,
                out_dim,
                in_dim,
                upstream.data(),
                out_dim as isize,
                1,
                &weight,
                in_dim as isize,
                1,
                T::zero(),
                &mut dx,
                in_dim as isize,
                1,
            );
            let mut dw = vec![T::zero(); out_dim * in_dim];
            T::gemm(
                out_dim,
                rows,
                in_dim,
                upstream.data(),
                1,
                out_dim as isize,
                input.data(),
                in_dim as isize,
                1,
                T::zero(),
                &mut dw,
                in_dim as isize,
                1,
            );
            let mut db = vec![T::zero(); out_dim];
            for row in upstream.data().chunks(out_dim) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            accumulate(params, &layer.weight_name(), &dw)?;
            accumulate(params, &layer.bias_name(), &db)?;
            Tensor::new(input.shape(), dx)
        }
        (LayerSpec::Relu, Cache::Relu { output }) => {
            check_upstream(layer, upstream, output.shape())?;
            let dx = output
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
                .collect();
            Tensor::new(output.shape(), dx)
        }
        (
            LayerSpec::Batchnorm { .. },
            Cache::BatchNorm {
                xhat,
                inv_std,
                dims: (outer, channels, inner),
                mode,
                ..
            },
        ) => {
            if upstream.len() != xhat.len() {
                return Err(Error::shape(
                    &layer.name,
                    format!(
                        "upstream has {} values, forward had {}",
                        upstream.len(),
                        xhat.len()
                    ),
                ));
            }
            let (channels, inner) = (*channels, *inner);
            let m = (*outer * inner) as f64;
            let gamma = params.value(&layer.weight_name())?.data().to_vec();
            let g = upstream.data();
            let mut sum_g = vec![0.0f64; channels];
            let mut sum_gx = vec![0.0f64; channels];
            for_each_channel(g.len(), channels, inner, |j, c| {
                sum_g[c] += g[j].f64();
                sum_gx[c] += g[j].f64() * xhat[j].f64();
            });
            let dgamma: Vec<T> = sum_gx.iter().map(|&v| T::of(v)).collect();
            let dbeta: Vec<T> = sum_g.iter().map(|&v| T::of(v)).collect();
            let mut dx = vec![T::zero(); g.len()];
            match mode {
                Mode::Train => {
                    let scale: Vec<f64> = (0..channels)
                        .map(|c| gamma[c].f64() * inv_std[c].f64() / m)
                        .collect();
                    for_each_channel(g.len(), channels, inner, |j, c| {
                        let v = m * g[j].f64() - sum_g[c] - xhat[j].f64() * sum_gx[c];
                        dx[j] = T::of(scale[c] * v);
                    });
                }
                Mode::Eval => {
                    for_each_channel(g.len(), channels, inner, |j, c| {
                        dx[j] = gamma[c] * inv_std[c] * g[j];
                    });
                }
            }
            accumulate(params, &layer.weight_name(), &dgamma)?;
            accumulate(params, &layer.bias_name(), &dbeta)?;
            Tensor::new(upstream.shape(), dx)
        }
        (
            LayerSpec::MaxpoolRows,
            Cache::MaxPool {
                input_shape,
                argmax,
            },
        ) => {
            let (b, n, c) = (input_shape[0], input_shape[1], input_shape[2]);
            check_upstream(layer, upstream, &[b, c])?;
            let mut dx = vec![T::zero(); b * n * c];
            for bi in 0..b {
                for ch in 0..c {
                    let r = argmax[bi * c + ch];
                    dx[bi * n * c + r * c + ch] += upstream.data()[bi * c + ch];
                }
            }
            Tensor::new(input_shape, dx)
        }
        (LayerSpec::Reshape { .. }, Cache::Reshape { input_shape }) => {
            let n: usize = input_shape.iter().product();
            if upstream.len() != n {
                return Err(Error::shape(
                    &layer.name,
                    "upstream size differs from forward",
                ));
            }
            upstream.clone().reshape(input_shape)
        }
        (LayerSpec::Sigmoid, Cache::Sigmoid { output }) => {
            check_upstream(layer, upstream, output.shape())?;
            let dx = output
                .data()
                .iter()
                .zip(upstream.data())
                .map(|(&y, &g)| g * y * (T::one() - y))
                .collect();
            Tensor::new(output.shape(), dx)
        }
        (LayerSpec::PointOutput, Cache::PointOutput { output }) => {
            check_upstream(layer, upstream, output.shape())?;
            let mut dx = upstream.data().to_vec();
            for (d, y) in dx.chunks_mut(6).zip(output.data().chunks(6)) {
                for j in 0..3 {
                    d[j] *= T::one() - y[j] * y[j];
                }
                for j in 3..6 {
                    d[j] *= y[j] * (T::one() - y[j]);
                }
            }
            Tensor::new(output.shape(), dx)
        }
        (_, cache) => Err(wrong_cache(layer, cache)),
    }
}

fn check_upstream<T: Scalar>(layer: &Layer, upstream: &Tensor<T>, want: &[usize]) -> Result<()> {
    if upstream.shape() != want {
        return Err(Error::shape(
            &layer.name,
            format!(
                "upstream gradient {:?}, expected {want:?}",
                upstream.shape()
            ),
        ));
    }
    Ok(())
}

fn accumulate<T: Scalar>(params: &mut ParamStore<T>, name: &str, delta: &[T]) -> Result<()> {
    let p = params.get_mut(name)?;
    for (g, &d) in p.grad.data_mut().iter_mut().zip(delta) {
        *g += d;
    }
    Ok(())
}

/// Folds the batch statistics of a train-mode batchnorm forward pass into
/// the running estimates.
pub fn commit_batch_stats<T: Scalar>(
    layer: &Layer,
    params: &mut ParamStore<T>,
    cache: &Cache<T>,
) -> Result<()> {
    if let Cache::BatchNorm {
        mode: Mode::Train,
        batch_mean,
        batch_var,
        ..
    } = cache
    {
        let mom = T::of(BN_MOMENTUM);
        let rest = T::one() - mom;
        let stats = params.stats_mut(&layer.name)?;
        for (r, &b) in stats.mean.data_mut().iter_mut().zip(batch_mean) {
            *r = mom * *r + rest * b;
        }
        for (r, &b) in stats.var.data_mut().iter_mut().zip(batch_var) {
            *r = mom * *r + rest * b;
        }
        stats.batches += 1;
    }
    Ok(())
}

/// A fixed chain of layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(name: &str, specs: Vec<LayerSpec>) -> Self {
        let layers = specs
            .into_iter()
            .enumerate()
            .map(|(i, spec)| Layer::new(format!("{name}.{i}"), spec))
            .collect();
        Self {
            name: name.to_string(),
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.spec.validate())
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for l in &self.layers {
            l.init_params(store);
        }
    }

    /// Names of the trainable tensors owned by this chain.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.spec,
                    LayerSpec::Conv2d { .. }
                        | LayerSpec::Deconv2d { .. }
                        | LayerSpec::Linear { .. }
                        | LayerSpec::Batchnorm { .. }
                )
            })
            .flat_map(|l| [l.weight_name(), l.bias_name()])
            .collect()
    }

    /// Forward pass keeping caches. Train mode also updates batchnorm
    /// running statistics.
    pub fn forward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for l in &self.layers {
            let (y, cache) = layer_forward(l, params, &x, mode)?;
            commit_batch_stats(l, params, &cache)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Eval-mode forward pass without caches; needs only shared access.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = input.clone();
        for l in &self.layers {
            x = layer_forward(l, params, &x, Mode::Eval)?.0;
        }
        Ok(x)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        caches: &[Cache<T>],
        upstream: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if caches.len() != self.layers.len() {
            return Err(Error::MissingCache(format!(
                "{}: {} caches for {} layers",
                self.name,
                caches.len(),
                self.layers.len()
            )));
        }
        let mut g = upstream.clone();
        for (l, c) in self.layers.iter().zip(caches).rev() {
            g = layer_backward(l, params, c, &g)?;
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn one_layer(spec: LayerSpec, seed: u64) -> (Layer, ParamStore<f64>) {
        let layer = Layer::new("l", spec);
        let mut store = ParamStore::new(seed);
        layer.init_params(&mut store);
        (layer, store)
    }

    #[test]
    fn identity_linear() {
        let (layer, mut store) = one_layer(LayerSpec::linear(3, 3), 0);
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        store.get_mut("l.weight").unwrap().value = eye;
        store.get_mut("l.bias").unwrap().value.fill(0.0);
        let v = Tensor::from_f64(&[1, 3], &[0.5, -2.0, 7.0]).unwrap();
        let (y, _) = layer_forward(&layer, &store, &v, Mode::Train).unwrap();
        assert_eq!(y, v);
    }

    #[test]
    fn relu_forward_backward() {
        let (layer, mut store) = one_layer(LayerSpec::Relu, 0);
        let x = Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap();
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let x = Tensor::from_f64(&[2], &[-1.0, 2.0]).unwrap();
        let (_, c) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        let up = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let g = layer_backward(&layer, &mut store, &c, &up).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn linear_input_gradient_is_transpose() {
        let (layer, mut store) = one_layer(LayerSpec::linear(2, 2), 0);
        store.get_mut("l.weight").unwrap().value =
            Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap();
        let (_, c) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        let up = Tensor::from_f64(&[1, 2], &[1.0, -1.0]).unwrap();
        let g = layer_backward(&layer, &mut store, &c, &up).unwrap();
        // W^T [1, -1] = [1 - 3, 2 - 4]
        assert_eq!(g.data(), &[-2.0, -2.0]);
    }

    #[test]
    fn pointwise_conv_matches_pixel_loop() {
        let (layer, mut store) = one_layer(LayerSpec::conv(1, 1, 1, 1, 0), 0);
        store.get_mut("l.weight").unwrap().value.fill(1.75);
        store.get_mut("l.bias").unwrap().value.fill(0.0);
        let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap();
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        for i in 0..4 {
            assert_eq!(y.data()[i], 1.75 * x.data()[i]);
        }
    }

    /// Direct nested-loop convolution used as an oracle.
    fn direct_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: &[f64],
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (wd + 2 * p - k) / s + 1;
        Tensor::from_fn(&[b, o, ho, wo], |flat| {
            let ox = flat % wo;
            let oy = (flat / wo) % ho;
            let oc = (flat / (wo * ho)) % o;
            let bi = flat / (wo * ho * o);
            let mut acc = bias[oc];
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let y = (oy * s + ki) as isize - p as isize;
                        let xx = (ox * s + kj) as isize - p as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            acc += w.data()[((oc * c + ci) * k + ki) * k + kj]
                                * x.data()[((bi * c + ci) * h + y as usize) * wd + xx as usize];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (layer, store) = one_layer(LayerSpec::conv(3, 3, 4, 2, 1), 5);
        let x = rand_tensor(&[2, 3, 7, 6], 9);
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        let want = direct_conv(
            &x,
            store.value("l.weight").unwrap(),
            store.value("l.bias").unwrap().data(),
            2,
            1,
        );
        assert_eq!(y.shape(), want.shape());
        assert!(y.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn deconv_doubles_resolution() {
        let (layer, store) = one_layer(LayerSpec::deconv(4, 4, 2, 2, 1), 1);
        let x = rand_tensor(&[1, 4, 4, 4], 2);
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
    }

    #[test]
    fn shape_errors_name_dimension() {
        let (layer, store) = one_layer(LayerSpec::conv(3, 3, 4, 1, 1), 0);
        let x = rand_tensor(&[1, 2, 5, 5], 0);
        let err = layer_forward(&layer, &store, &x, Mode::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("channel"), "{err}");
        let (layer, store) = one_layer(LayerSpec::linear(3, 2), 0);
        let x = rand_tensor(&[1, 4], 0);
        let err = layer_forward(&layer, &store, &x, Mode::Train)
            .unwrap_err()
            .to_string();
        assert!(err.contains("feature"), "{err}");
    }

    #[test]
    fn non_finite_input_rejected() {
        let (layer, store) = one_layer(LayerSpec::Relu, 0);
        let x = Tensor::from_f64(&[2], &[1.0, f64::NAN]).unwrap();
        assert!(matches!(
            layer_forward(&layer, &store, &x, Mode::Train),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn mismatched_cache_rejected() {
        let (relu, mut store) = one_layer(LayerSpec::Relu, 0);
        let (_, cache) = layer_forward(&relu, &store, &rand_tensor(&[2], 0), Mode::Train).unwrap();
        let lin = Layer::new("l", LayerSpec::linear(2, 2));
        lin.init_params(&mut store);
        let err = layer_backward(&lin, &mut store, &cache, &rand_tensor(&[1, 2], 0));
        assert!(matches!(err, Err(Error::MissingCache(_))));
        let seq = Sequential::new("s", vec![LayerSpec::Relu, LayerSpec::Relu]);
        assert!(matches!(
            seq.backward(&mut store, &[cache], &rand_tensor(&[2], 0)),
            Err(Error::MissingCache(_))
        ));
    }

    #[test]
    fn eval_batchnorm_needs_statistics() {
        let spec = LayerSpec::Batchnorm {
            channels: 2,
            channel_axis: 1,
        };
        let (layer, mut store) = one_layer(spec, 0);
        let x = rand_tensor(&[4, 2], 3);
        assert!(matches!(
            layer_forward(&layer, &store, &x, Mode::Eval),
            Err(Error::Unpopulated(_))
        ));
        let (_, c) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        commit_batch_stats(&layer, &mut store, &c).unwrap();
        assert!(layer_forward(&layer, &store, &x, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let spec = LayerSpec::Batchnorm {
            channels: 3,
            channel_axis: 1,
        };
        let (layer, store) = one_layer(spec, 0);
        let mut x = rand_tensor(&[5, 3, 4, 4], 8);
        x.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 2.0);
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| (0..16).map(move |i| (b, i)))
                .map(|(b, i)| y.data()[(b * 3 + c) * 16 + i])
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5, "mean {m}");
            // eps inside the square root shrinks the variance slightly
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
    }

    #[test]
    fn maxpool_rows_takes_column_max() {
        let (layer, store) = one_layer(LayerSpec::MaxpoolRows, 0);
        let x = Tensor::from_f64(&[1, 3, 2], &[1.0, 5.0, 4.0, -1.0, 2.0, 6.0]).unwrap();
        let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    fn check_layer(spec: LayerSpec, shape: &[usize], seed: u64) -> f64 {
        let (layer, store) = one_layer(spec, seed);
        let x = rand_tensor(shape, seed + 100);
        let probe = {
            let (y, _) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
            rand_tensor(y.shape(), seed + 200)
        };
        // input gradient
        let err_in = grad_check(
            |inp| {
                let mut st = store.clone();
                let (y, c) = layer_forward(&layer, &st, inp, Mode::Train)?;
                let g = layer_backward(&layer, &mut st, &c, &probe)?;
                Ok((Tensor::from_f64(&[1], &[y.dot(&probe)])?, g))
            },
            &x,
            1e-6,
        )
        .unwrap();
        // parameter gradients
        let mut worst = err_in;
        let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
        for name in names {
            let p0 = store.value(&name).unwrap().clone();
            let err = grad_check(
                |pv| {
                    let mut st = store.clone();
                    st.get_mut(&name)?.value = pv.clone();
                    let (y, c) = layer_forward(&layer, &st, &x, Mode::Train)?;
                    layer_backward(&layer, &mut st, &c, &probe)?;
                    Ok((
                        Tensor::from_f64(&[1], &[y.dot(&probe)])?,
                        st.get(&name)?.grad.clone(),
                    ))
                },
                &p0,
                1e-6,
            )
            .unwrap();
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn every_layer_kind_passes_grad_check() {
        let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
            (LayerSpec::conv(2, 3, 3, 2, 1), vec![2, 2, 6, 5]),
            (LayerSpec::deconv(3, 4, 2, 2, 1), vec![2, 3, 3, 3]),
            (LayerSpec::linear(5, 4), vec![3, 5]),
            (LayerSpec::linear(3, 2), vec![2, 4, 3]),
            (LayerSpec::Relu, vec![4, 6]),
            (
                LayerSpec::Batchnorm {
                    channels: 3,
                    channel_axis: 1,
                },
                vec![4, 3, 2, 2],
            ),
            (
                LayerSpec::Batchnorm {
                    channels: 3,
                    channel_axis: 2,
                },
                vec![2, 5, 3],
            ),
            (LayerSpec::MaxpoolRows, vec![2, 7, 3]),
            (LayerSpec::Sigmoid, vec![3, 3]),
            (LayerSpec::PointOutput, vec![2, 4, 6]),
            (LayerSpec::Reshape { shape: vec![2, 3] }, vec![2, 6]),
        ];
        for seed in 0..10 {
            for (spec, shape) in &cases {
                let err = check_layer(spec.clone(), shape, seed);
                assert!(err < 1e-4, "{} seed {seed}: {err}", spec.kind());
            }
        }
    }

    /// <L x, y> = <x, L^T y> for the linear (bias-free) part of each layer.
    #[test]
    fn adjoint_identity_for_linear_kinds() {
        let cases: Vec<(LayerSpec, Vec<usize>)> = vec![
            (LayerSpec::conv(3, 3, 4, 2, 1), vec![2, 3, 8, 8]),
            (LayerSpec::deconv(4, 4, 3, 2, 1), vec![2, 4, 4, 4]),
            (LayerSpec::linear(6, 5), vec![3, 6]),
        ];
        for (spec, shape) in cases {
            for seed in 0..10 {
                let (layer, mut store) = one_layer(spec.clone(), seed);
                store.get_mut("l.bias").unwrap().value.fill(0.0);
                let x = rand_tensor(&shape, seed + 1);
                let (lx, cache) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
                let y = rand_tensor(lx.shape(), seed + 2);
                let lty = layer_backward(&layer, &mut store, &cache, &y).unwrap();
                let lhs = lx.dot(&y);
                let rhs = x.dot(&lty);
                assert!((lhs - rhs).abs() < 1e-10, "{}: {lhs} vs {rhs}", spec.kind());
            }
        }
    }

    #[test]
    fn running_stats_use_momentum() {
        let spec = LayerSpec::Batchnorm {
            channels: 1,
            channel_axis: 1,
        };
        let (layer, mut store) = one_layer(spec, 0);
        let x = Tensor::from_f64(&[2, 1], &[1.0, 3.0]).unwrap();
        let (_, c) = layer_forward(&layer, &store, &x, Mode::Train).unwrap();
        commit_batch_stats(&layer, &mut store, &c).unwrap();
        let s = store.stats("l").unwrap();
        assert!((s.mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2 folded into an initial 1
        assert!((s.var.data()[0] - 1.1).abs() < 1e-12);
    }
}
