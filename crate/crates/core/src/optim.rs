//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state over a fixed list of parameter tensors, each with its own
/// learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates `params` in place; `lrs` has one rate per tensor.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::invalid("optimizer: parameter, gradient and rate counts differ"));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            if grads[i].shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: grads[i].shape().to_vec(),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut data = p.data().to_vec();
            for (k, g) in grads[i].data().iter().enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                data[k] -= lrs[i] * mh / (vh.sqrt() + eps);
            }
            *p = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Tensor::vector(vec![3.0, -0.1, 0.0]).unwrap()];
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, &[0.01]).unwrap();
        let d = p[0].data();
        assert!((d[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((d[1] - (-2.0 + 0.01)).abs() < 1e-7);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::vector(vec![3.0, -4.0]).unwrap()];
        let mut opt = Adam::new(&p, AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![p[0].scale(2.0).unwrap()];
            opt.step(&mut p, &g, &[0.05]).unwrap();
        }
        assert!(p[0].squared_norm() < 1e-4);
    }

    #[test]
    fn rejects_mismatched_lists() {
        let mut p = vec![Tensor::vector(vec![1.0]).unwrap()];
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(opt.step(&mut p, &[], &[0.1]).is_err());
    }
}
