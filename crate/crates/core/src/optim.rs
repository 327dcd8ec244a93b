//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[&[usize]]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One bias-corrected update of every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam slot {i}: state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_b1 = T::from_f64(1.0 - c.beta1);
        let one_b2 = T::from_f64(1.0 - c.beta2);
        let corr1 = T::from_f64(1.0 - c.beta1.powi(t));
        let corr2 = T::from_f64(1.0 - c.beta2.powi(t));
        let lr = T::from_f64(c.lr);
        let eps = T::from_f64(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                let mj = b1 * m.data()[j] + one_b1 * gj;
                let vj = b2 * v.data()[j] + one_b2 * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj / corr1;
                let vhat = vj / corr2;
                pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[3]]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.step, 1);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(st.step, 2);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // At t = 1: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        for g0 in [3.0f64, -0.02, 0.5] {
            let mut p = Tensor::<f64>::scalar(0.7);
            let mut st = AdamState::new(cfg, &[&[]]);
            st.step(&mut [&mut p], &[&Tensor::scalar(g0)]).unwrap();
            let delta = p.item() - 0.7;
            assert!((delta + cfg.lr * g0.signum()).abs() < 1e-6 * cfg.lr, "g={g0} delta={delta}");
            let reference = -cfg.lr * g0 / (g0.abs() + cfg.eps);
            assert!((delta - reference).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_groups_update_identically() {
        let mut a = Tensor::<f32>::from_f64(&[2], &[0.1, 0.2]).unwrap();
        let mut b = a.clone();
        let g = Tensor::<f32>::from_f64(&[2], &[0.3, -0.4]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), &[&[2], &[2]]);
        for _ in 0..5 {
            st.step(&mut [&mut a, &mut b], &[&g, &g]).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(st.m[0], st.m[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = AdamState::new(AdamConfig::default(), &[&[2]]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
        assert_eq!(st.step, 0);
    }
}
