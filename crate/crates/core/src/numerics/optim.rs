//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers and step counter for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    pub step: u64,
    /// Learning rate of the most recent step.
    pub lr: f64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            lr: 0.0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One AdamW update. Parameters whose gradient is `None` are left alone
    /// and their moments are not advanced.
    ///
    /// Every gradient is checked for finiteness before anything is written,
    /// so a failing step leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first_moment.len() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{} params, {} grads, {} moment buffers",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.len() || g.len() != self.first_moment[i].len() {
                    return Err(Error::shape("adamw_step", format!("gradient {i} has length {}", g.len())));
                }
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of parameter {i}")));
                }
            }
        }

        self.step += 1;
        self.lr = lr;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let decay = T::of(1.0 - lr * weight_decay);
        let (lr_t, eps_t, bc1_t, bc2_t) = (T::of(lr), T::of(eps), T::of(bc1), T::of(bc2));

        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] / bc1_t;
                let v_hat = v[j] / bc2_t;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps_t);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(w: f64) -> Tensor<f64> {
        Tensor::scalar(w)
    }

    #[test]
    fn decay_only_update() {
        let mut w = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut st = OptimizerState::new(cfg, &[&w]);
        let zero = vec![0.0; 3];
        st.step(&mut [&mut w], &[Some(&zero)], 0.01).unwrap();
        for (got, orig) in w.data().iter().zip([1.0f64, -2.0, 0.5]) {
            assert!((got - orig * (1.0 - 0.001)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut w = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let before = w.clone();
        let mut st = OptimizerState::new(AdamWConfig::default(), &[&w]);
        st.step(&mut [&mut w], &[Some(&[1.0, -4.0][..])], 0.0).unwrap();
        assert_eq!(w, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nan_gradient_rejected_without_side_effects() {
        let mut w = scalar_param(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &[&w]);
        let err = st.step(&mut [&mut w], &[Some(&[f64::NAN][..])], 0.1);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(w.data(), &[1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn descends_quadratic() {
        let mut w = scalar_param(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &[&w]);
        for _ in 0..200 {
            let g = [2.0 * w.data()[0]];
            st.step(&mut [&mut w], &[Some(&g[..])], 0.05).unwrap();
        }
        assert!(w.data()[0].abs() < 0.1, "w = {}", w.data()[0]);
    }

    #[test]
    fn zero_decay_matches_plain_adam() {
        // Plain Adam written out independently.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut w = scalar_param(1.5);
        let mut st = OptimizerState::new(cfg, &[&w]);
        let (mut x, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        for t in 1..=50 {
            let g = [(w.data()[0]).sin() + 0.3];
            st.step(&mut [&mut w], &[Some(&g[..])], 0.01).unwrap();
            let gx = x.sin() + 0.3;
            m = 0.9 * m + 0.1 * gx;
            v = 0.999 * v + 0.001 * gx * gx;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w.data()[0] - x).abs() < 1e-12);
    }

    #[test]
    fn skipped_parameters_keep_moments() {
        let mut a = scalar_param(1.0);
        let mut b = scalar_param(2.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), &[&a, &b]);
        st.step(&mut [&mut a, &mut b], &[Some(&[1.0][..]), None], 0.1).unwrap();
        assert_eq!(b.data(), &[2.0]);
        assert_eq!(st.first_moment[1], vec![0.0]);
    }
}
