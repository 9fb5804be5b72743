//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    steps: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *w -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new(&[3], vec![0.5, -2.0, 0.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] - 1.1).abs() < 1e-7);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = ParamStore::<f64>::new();
        p.insert("x", Tensor::new(&[2], vec![3.0, -4.0]).unwrap());
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = p.get("x").unwrap().clone();
            let mut g = BTreeMap::new();
            g.insert("x".to_string(), x.map(|v| 2.0 * v));
            adam.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p.get("x").unwrap().max_abs() < 1e-2);
    }
}
