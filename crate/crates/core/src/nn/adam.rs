use serde::{Deserialize, Serialize};

use super::{Checkpoint, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    pub fn store_into(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.insert(format!("{prefix}step"), Tensor::scalar(self.step as f64));
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            ckpt.insert(format!("{prefix}m.{i}"), m.clone());
            ckpt.insert(format!("{prefix}v.{i}"), v.clone());
        }
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        let missing = |k: &str| Error::format("checkpoint", format!("missing optimizer state {k}"));
        let step_key = format!("{prefix}step");
        self.step = ckpt.tensor(&step_key).ok_or_else(|| missing(&step_key))?.item() as u64;
        for i in 0..self.m.len() {
            for (slot, tag) in [(&mut self.m[i], "m"), (&mut self.v[i], "v")] {
                let key = format!("{prefix}{tag}.{i}");
                let t = ckpt.tensor(&key).ok_or_else(|| missing(&key))?;
                if t.shape() != slot.shape() {
                    return Err(Error::format("checkpoint", format!("{key}: shape mismatch")));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::from_fn(&[7], |i| (i as f64).sin() * 1e-3));
        let before = ps.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &ps);
        for k in 0..10 {
            let g = vec![Tensor::from_fn(&[7], |i| (i + k) as f64 - 3.0)];
            opt.update(&mut ps, &g);
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Tensor::full(&[2], 3.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, ..Default::default() }, &ps);
        for _ in 0..500 {
            let g = vec![ps.get(id).scale(2.0)];
            opt.update(&mut ps, &g);
        }
        assert!(ps.get(id).max_abs() < 1e-2);
    }
}
