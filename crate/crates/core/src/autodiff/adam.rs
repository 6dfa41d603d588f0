use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape().to_vec());
        Adam {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified when a gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(config_err!(
                "adam: {} moment buffers, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(config_err!(
                    "adam: tensor {i} param {:?} grad {:?} state {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                ));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    step: self.step + 1,
                    message: format!("non-finite gradient {} in tensor {i} at index {pos}", g.data()[pos]),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gv), (mv, vv)) in it {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Tensor::vector(&[1.0, -2.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros([2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::vector(&[0.0, 0.0, 0.0])];
        let cfg = AdamConfig::default();
        let mut adam = Adam::new(cfg, &p);
        adam.step(&mut p, &[Tensor::vector(&[3.0, -0.02, 1e3])]).unwrap();
        for (w, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((w - s * cfg.lr).abs() < 1e-9 * cfg.lr.max(1.0), "{w}");
        }
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut p = vec![Tensor::vector(&[0.0])];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() }, &p);
        for _ in 0..200 {
            let w = p[0].data()[0];
            adam.step(&mut p, &[Tensor::vector(&[2.0 * (w - 3.0)])]).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 0.05, "{:?}", p[0]);
        assert_eq!(adam.steps_taken(), 200);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut p = vec![Tensor::vector(&[1.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        let err = adam.step(&mut p, &[Tensor::vector(&[f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::Training { step: 1, .. }), "{err}");
        assert_eq!(p[0].data(), &[1.0]);
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::vector(&[1.0, 2.0])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::vector(&[1.0])]).is_err());
    }
}
