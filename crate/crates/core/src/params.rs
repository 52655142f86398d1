//! Named parameter storage, initialization and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Parameters keyed by dotted path, e.g. `encoder.stage1.conv_a.w`.
/// Iteration order is lexicographic, which fixes checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Copy every parameter of `other` into this store, overwriting.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.params.insert(k.clone(), v.clone());
        }
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Round every value to the nearest `f32`, the precision checkpoints store.
    pub fn snap_to_f32(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Deterministic initializers used by module constructors.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// He-normal for a layer with `fan_in` inputs.
    pub fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }

    /// Xavier-uniform.
    pub fn xavier(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.gen_range(-a..a))
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| dist.sample(self.rng))
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(lo..hi))
    }
}

/// Adam with bias correction. Moment estimates are kept per parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Apply one update with learning rate `lr`. Parameters without a
    /// gradient entry are left untouched; `mask` may zero individual
    /// gradient entries (e.g. a pinned codebook row).
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        mask: impl Fn(&str, usize) -> bool,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.numel() {
                if !mask(name, i) {
                    continue;
                }
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= step;
            }
        }
    }
}

/// Polynomial decay `lr0 * (1 - step/total)^power`, clamped at zero.
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr0 * (1.0 - frac).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_lr(1e-5, 0, 100, 0.9), 1e-5);
        assert_eq!(poly_lr(1e-5, 100, 100, 0.9), 0.0);
    }

    #[test]
    fn poly_schedule_non_increasing() {
        let lrs: Vec<f64> = (0..=50).map(|s| poly_lr(2e-3, s, 50, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::default();
        for _ in 0..500 {
            let x = store.get("x").unwrap().clone();
            let g = BTreeMap::from([("x".to_string(), x.map(|v| 2.0 * v))]);
            adam.update(&mut store, &g, 0.05, |_, _| true);
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn snap_to_f32_is_idempotent() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(&[3], vec![0.1, 1.0 / 3.0, -7.25]));
        store.snap_to_f32();
        let once = store.clone();
        store.snap_to_f32();
        assert_eq!(once, store);
    }
}
