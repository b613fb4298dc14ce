//! Adam without weight decay and a cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

/// Cosine decay from `lr` at step 0 to `lr_min` at `total` steps.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = (step.min(total) as f64) / total as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const MOMENT_PREFIX: [&str; 2] = ["adam.m.", "adam.v."];
const STEP_KEY: &str = "adam.t";

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                let gi = *gi as f64;
                let mn = b1 * (*mi as f64) + (1.0 - b1) * gi;
                let vn = b2 * (*vi as f64) + (1.0 - b2) * gi * gi;
                *mi = mn as Real;
                *vi = vn as Real;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pi = (*pi as f64 - update) as Real;
            }
        }
        Ok(())
    }

    /// Moments and step count as a parameter store, for checkpointing.
    pub fn state(&self) -> ParamStore {
        let mut s = ParamStore::new();
        for (prefix, map) in MOMENT_PREFIX.iter().zip([&self.m, &self.v]) {
            for (k, t) in map {
                s.insert(format!("{prefix}{k}"), t.clone());
            }
        }
        // u64 steps fit exactly in both float widths for any realistic run.
        s.insert(STEP_KEY, Tensor::scalar(self.t as Real));
        s
    }

    pub fn restore(&mut self, state: &ParamStore) -> Result<()> {
        let t = state
            .get(STEP_KEY)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{STEP_KEY}`")))?
            .item()?;
        self.t = t as u64;
        self.m.clear();
        self.v.clear();
        for (name, value) in state.iter() {
            if let Some(k) = name.strip_prefix(MOMENT_PREFIX[0]) {
                self.m.insert(k.to_string(), value.clone());
            } else if let Some(k) = name.strip_prefix(MOMENT_PREFIX[1]) {
                self.v.insert(k.to_string(), value.clone());
            } else if name != STEP_KEY {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry `{name}`")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - 0.5 * (1e-3 + 1e-5)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, step one moves each weight by lr·sign(g).
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[2], vec![0.3, -2.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        adam.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] as f64 - 0.9).abs() < 1e-6);
        assert!((w[1] as f64 + 0.9).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::new(&[1], vec![0.5]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[1], vec![1.5]).unwrap());
        let mut a = Adam::new(0.9, 0.999, 1e-8);
        a.step(&mut p, &g, 0.01).unwrap();
        let mut b = Adam::new(0.9, 0.999, 1e-8);
        b.restore(&a.state()).unwrap();
        assert_eq!(a, b);
    }
}
