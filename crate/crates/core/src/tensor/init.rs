//! Seeded parameter initialization and the named parameter store.
//!
//! The generator is SplitMix64 (64-bit state, Steele/Lea/Flood 2014): every
//! draw advances the state by the golden-ratio increment and mixes it through
//! two xor-shift-multiply rounds. Weights are drawn uniformly from
//! `±sqrt(1/fan_in)`.

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::tape::{BoundParams, Tape};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Deterministic random source used across the crate.
#[derive(Clone, Debug)]
pub struct Rng(SplitMix64);

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }

    /// Independent stream for `(seed, stream)`, e.g. a per-image generator.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut mix = SplitMix64::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        Rng(SplitMix64::seed_from_u64(mix.gen::<u64>()))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.gen_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn tensor_uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.range(lo, hi) as Real)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Ordered collection of named model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams::new(vars)
    }

    /// Checks that `other` has exactly the same names and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Fills a [`ParamStore`] with seeded initial values.
pub struct Initializer<'a> {
    rng: Rng,
    store: &'a mut ParamStore,
}

impl<'a> Initializer<'a> {
    pub fn new(seed: u64, store: &'a mut ParamStore) -> Self {
        Initializer {
            rng: Rng::seed(seed),
            store,
        }
    }

    /// Uniform in `±sqrt(1/fan_in)`.
    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let t = self.rng.tensor_uniform(shape, -bound, bound);
        self.store.insert(name, t);
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: Real) {
        self.store.insert(name, Tensor::full(shape, value));
    }

    /// Conv weight `[c_out, c_in/groups, k, k]` plus bias `[c_out]`.
    pub fn conv(&mut self, prefix: &str, c_out: usize, c_in_per_group: usize, k: usize) {
        let fan_in = c_in_per_group * k * k;
        self.uniform(format!("{prefix}.weight"), &[c_out, c_in_per_group, k, k], fan_in);
        self.uniform(format!("{prefix}.bias"), &[c_out], fan_in);
    }

    /// Dense weight `[c_in, c_out]` plus bias `[c_out]`.
    pub fn linear(&mut self, prefix: &str, c_in: usize, c_out: usize) {
        self.uniform(format!("{prefix}.weight"), &[c_in, c_out], c_in);
        self.uniform(format!("{prefix}.bias"), &[c_out], c_in);
    }

    pub fn layer_norm(&mut self, prefix: &str, width: usize) {
        self.constant(format!("{prefix}.gain"), &[width], 1.0);
        self.constant(format!("{prefix}.bias"), &[width], 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed(7);
        let mut b = Rng::seed(7);
        for _ in 0..10 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        assert_ne!(Rng::stream(7, 1).uniform(), Rng::stream(7, 2).uniform());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(3, &mut store);
        init.conv("c", 8, 4, 3);
        let w = store.get("c.weight").unwrap();
        let bound = (1.0 / 36.0 as Real).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.numel(), 8 * 4 * 9 + 8);
    }
}
