//! Named parameter storage and the SGD update.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Running statistics of one batchnorm layer.
#[derive(Clone, Debug)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Number of train-mode batches folded into the statistics.
    pub batches: u64,
}

/// Parameters with paired gradients plus batchnorm buffers. Iteration order
/// is the lexicographic order of names, which keeps serialization stable.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    seed: u64,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Param<T>>,
    stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`. Values
    /// are drawn in f64 so stores of either precision built from one seed
    /// hold the same numbers.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], bound: f64) {
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)));
        self.insert(name, value);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64) {
        self.insert(name, Tensor::from_fn(shape, |_| T::of(v)));
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let grad = Tensor::zeros(value.shape());
        self.params.insert(name.to_string(), Param { value, grad });
    }

    pub fn init_stats(&mut self, name: &str, channels: usize) {
        self.stats.insert(
            name.to_string(),
            RunningStats {
                mean: Tensor::zeros(&[channels]),
                var: Tensor::from_fn(&[channels], |_| T::one()),
                batches: 0,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn stats(&self, name: &str) -> Result<&RunningStats<T>> {
        self.stats
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown batchnorm layer {name}")))
    }

    pub fn stats_mut(&mut self, name: &str) -> Result<&mut RunningStats<T>> {
        self.stats
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown batchnorm layer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn all_stats(&self) -> impl Iterator<Item = (&String, &RunningStats<T>)> {
        self.stats.iter()
    }

    pub fn all_stats_mut(&mut self) -> impl Iterator<Item = (&String, &mut RunningStats<T>)> {
        self.stats.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn check_grads_finite(&self) -> Result<()> {
        for (name, p) in &self.params {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        Ok(())
    }

    /// Same parameters and statistics in another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            seed: self.seed,
            rng: self.rng.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                            batches: s.batches,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// `p <- p - lr * grad(p)` for every parameter, then zeroes the gradients.
/// Nothing is updated if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, learning_rate: f64) -> Result<()> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {learning_rate}"
        )));
    }
    store.check_grads_finite()?;
    let lr = T::of(learning_rate);
    for p in store.params.values_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data_mut()) {
            *v -= lr * *g;
            *g = T::zero();
        }
    }
    Ok(())
}

/// SGD with optional heavy-ball momentum; `momentum == 0` is plain
/// [`sgd_step`].
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(store, self.learning_rate);
        }
        store.check_grads_finite()?;
        let lr = T::of(self.learning_rate);
        let mu = T::of(self.momentum);
        for (name, p) in store.params.iter_mut() {
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((v, g), u) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data_mut())
                .zip(vel.data_mut())
            {
                *u = mu * *u + *g;
                *v -= lr * *u;
                *g = T::zero();
            }
        }
        Ok(())
    }
}
