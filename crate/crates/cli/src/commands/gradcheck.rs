//! Finite-difference checks of every layer kind, each loss term on its own
//! inputs, and each term plus the weighted objective through a small
//! network, all in f64.

use crossdesc_core::descnet::{DualAutoEncoder, ImagePatch, NetworkConfig, PointPatch};
use crossdesc_core::gradcheck::grad_check_coords;
use crossdesc_core::layers::{layer_backward, layer_forward, Layer, LayerSpec, Mode};
use crossdesc_core::losses::*;
use crossdesc_core::params::ParamStore;
use crossdesc_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(v: f64) -> Result<Tensor<f64>> {
    Tensor::from_f64(&[1], &[v])
}

fn layer_cases() -> Vec<(LayerSpec, Vec<usize>)> {
    vec![
        (LayerSpec::conv(2, 3, 3, 2, 1), vec![2, 2, 6, 5]),
        (LayerSpec::deconv(3, 4, 2, 2, 1), vec![2, 3, 3, 3]),
        (LayerSpec::linear(5, 4), vec![3, 5]),
        (LayerSpec::linear(3, 2), vec![2, 4, 3]),
        (LayerSpec::Relu, vec![4, 6]),
        (LayerSpec::Batchnorm { channels: 3, channel_axis: 1 }, vec![4, 3, 2, 2]),
        (LayerSpec::Batchnorm { channels: 3, channel_axis: 2 }, vec![2, 5, 3]),
        (LayerSpec::MaxpoolRows, vec![2, 7, 3]),
        (LayerSpec::Sigmoid, vec![3, 3]),
        (LayerSpec::PointOutput, vec![2, 4, 6]),
        (LayerSpec::Reshape { shape: vec![2, 3] }, vec![2, 6]),
    ]
}

/// Input and parameter gradients of `<layer(x), probe>`.
fn layer_error(spec: LayerSpec, shape: &[usize], seed: u64, eps: f64) -> Result<f64> {
    let layer = Layer::new("l", spec);
    let mut store = ParamStore::<f64>::new(seed);
    layer.init_params(&mut store);
    let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
    let x = Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0));
    let (y0, _) = layer_forward(&layer, &store, &x, Mode::Train)?;
    let probe = Tensor::from_fn(y0.shape(), |_| r.random_range(-1.0..1.0));
    let mut worst = grad_check_coords(
        |inp| {
            let mut st = store.clone();
            let (y, c) = layer_forward(&layer, &st, inp, Mode::Train)?;
            let g = layer_backward(&layer, &mut st, &c, &probe)?;
            Ok((scalar(y.dot(&probe))?, g))
        },
        &x,
        eps,
        None,
    )?
    .max_relative_error;
    let names: Vec<String> = store.params().map(|(k, _)| k.clone()).collect();
    for name in names {
        let p0 = store.value(&name)?.clone();
        let e = grad_check_coords(
            |pv| {
                let mut st = store.clone();
                st.get_mut(&name)?.value = pv.clone();
                let (y, c) = layer_forward(&layer, &st, &x, Mode::Train)?;
                layer_backward(&layer, &mut st, &c, &probe)?;
                Ok((scalar(y.dot(&probe))?, st.get(&name)?.grad.clone()))
            },
            &p0,
            eps,
            None,
        )?;
        worst = worst.max(e.max_relative_error);
    }
    Ok(worst)
}

fn random_pair(seed: u64) -> Result<(ImagePatch, PointPatch)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let img = ImagePatch::from_fn(8, |_, _| [r.random(), r.random(), r.random()])?;
    let pts = (0..8)
        .map(|_| {
            [
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random(),
                r.random(),
                r.random(),
            ]
        })
        .collect();
    Ok((img, PointPatch::new(pts)?))
}

/// Gradient of the weighted objective with respect to all parameters of a
/// small network on a 2-pair batch.
fn objective_error(seed: u64, weights: LossWeights, eps: f64) -> Result<f64> {
    let cfg = NetworkConfig::build(4, 8, 8, &[2, 3], &[4, 5], &[6], seed);
    let net = DualAutoEncoder::<f64>::new(cfg)?;
    let pairs = [random_pair(seed * 10)?, random_pair(seed * 10 + 1)?];
    let images: Vec<&ImagePatch> = pairs.iter().map(|p| &p.0).collect();
    let points: Vec<&PointPatch> = pairs.iter().map(|p| &p.1).collect();
    let loss = LossConfig { weights, ..Default::default() };
    let names: Vec<String> = net.params.params().map(|(k, _)| k.clone()).collect();
    let mut flat = Vec::new();
    for n in &names {
        flat.extend_from_slice(net.params.value(n)?.data());
    }
    let theta = Tensor::new(&[flat.len()], flat)?;
    Ok(grad_check_coords(
        |t| {
            let mut m = net.clone();
            let mut off = 0;
            for n in &names {
                let p = m.params.get_mut(n)?;
                let len = p.value.len();
                p.value.data_mut().copy_from_slice(&t.data()[off..off + len]);
                off += len;
            }
            m.params.zero_grad();
            let l = combined_loss(&mut m, &images, &points, &loss, TrainMode::Dual)?;
            let mut g = Vec::with_capacity(t.len());
            for n in &names {
                g.extend_from_slice(m.params.get(n)?.grad.data());
            }
            Ok((scalar(l.total)?, Tensor::new(t.shape(), g)?))
        },
        &theta,
        eps,
        None,
    )?
    .max_relative_error)
}

/// `(check name, max relative error)` for one seed.
pub fn suite(seed: u64, eps: f64) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (spec, shape) in layer_cases() {
        let kind = spec.kind().to_string();
        out.push((kind, layer_error(spec, &shape, seed, eps)?));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed + 500);
    let input: Vec<f64> = (0..27).map(|_| r.random()).collect();
    let recon = Tensor::from_fn(&[27], |_| r.random::<f64>());
    let e = grad_check_coords(
        |q| {
            let (v, g) = photometric_with_grad(&input, q.data(), 9);
            Ok((scalar(v)?, Tensor::new(q.shape(), g)?))
        },
        &recon,
        eps,
        None,
    )?;
    out.push(("photometric".into(), e.max_relative_error));
    let a: Vec<f64> = (0..9 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
    let b = Tensor::from_fn(&[7 * 6], |_| r.random_range(-1.0..1.0));
    let e = grad_check_coords(
        |q| {
            let (v, g) = chamfer_with_grad(&a, q.data(), ChamferSpace::Full)?;
            Ok((scalar(v)?, Tensor::new(q.shape(), g)?))
        },
        &b,
        eps,
        None,
    )?;
    out.push(("chamfer".into(), e.max_relative_error));
    let x = Tensor::from_fn(&[15], |_| r.random_range(-1.0..1.0));
    let e = grad_check_coords(
        |q| {
            let d = q.data();
            // large margin keeps the hinge active
            let (l, ga, gp, gn) = triplet_with_grad(&d[..5], &d[5..10], &d[10..], 3.0);
            Ok((scalar(l)?, Tensor::new(&[15], ga.into_iter().chain(gp).chain(gn).collect())?))
        },
        &x,
        eps,
        None,
    )?;
    out.push(("triplet".into(), e.max_relative_error));
    let w = |alpha, beta, gamma| LossWeights { alpha, beta, gamma };
    for (name, weights) in [
        ("network photometric", w(1.0, 0.0, 0.0)),
        ("network chamfer", w(0.0, 1.0, 0.0)),
        ("network triplet", w(0.0, 0.0, 1.0)),
        ("network objective", w(1.0, 1.0, 1.0)),
    ] {
        out.push((name.into(), objective_error(seed, weights, eps)?));
    }
    Ok(out)
}
