use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamWConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are allocated on the
/// first step a parameter receives a gradient.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step_count: u64,
    first_moment: HashMap<ParamId, Tensor<T>>,
    second_moment: HashMap<ParamId, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step_count: 0,
            first_moment: HashMap::new(),
            second_moment: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        Some((self.first_moment.get(&id)?, self.second_moment.get(&id)?))
    }

    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears the gradients. A non-finite gradient aborts the step
    /// before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, p) in store.iter() {
            if let Some(g) = &p.grad {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                }
            }
        }
        self.step_count += 1;
        let c = &self.config;
        let t = self.step_count as i32;
        let lr = T::of(c.learning_rate);
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let eps = T::of(c.epsilon);
        let decay = T::one() - lr * T::of(c.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for (id, p) in store.iter_mut() {
            if !p.requires_grad {
                continue;
            }
            let Some(grad) = p.grad.take() else { continue };
            let shape = p.value.shape().to_vec();
            let m = self.first_moment.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.second_moment.entry(id).or_insert_with(|| Tensor::zeros(&shape));
            let (m, v) = (m.data_mut(), v.data_mut());
            let w = p.value.data_mut();
            for j in 0..w.len() {
                let gj = grad.data()[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] = w[j] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![w]), true);
        (s, id)
    }

    fn set_grad(s: &mut ParamStore<f64>, id: ParamId, g: f64) {
        s.get_mut(id).grad = Some(Tensor::vector(vec![g]));
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut s, id) = store_with(0.7);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::with_lr(0.1)
        });
        set_grad(&mut s, id, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data(), &[0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let (mut s, id) = store_with(-1.3);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.0));
        for _ in 0..5 {
            set_grad(&mut s, id, 2.5);
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id).data(), &[-1.3]);
    }

    #[test]
    fn one_step_descends_quadratic() {
        let (mut s, id) = store_with(1.0);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        set_grad(&mut s, id, 2.0);
        opt.step(&mut s).unwrap();
        assert!(s.value(id).data()[0] < 1.0);
    }

    #[test]
    fn converges_on_bowl_within_500_steps() {
        let (mut s, id) = store_with(1.0);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.05));
        let mut converged_at = None;
        for step in 0..500 {
            let w = s.value(id).data()[0];
            if w.abs() < 1e-3 {
                converged_at = Some(step);
                break;
            }
            set_grad(&mut s, id, 2.0 * w);
            opt.step(&mut s).unwrap();
        }
        assert!(converged_at.is_some(), "w = {}", s.value(id).data()[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let (mut s, id) = store_with(0.5);
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1));
        set_grad(&mut s, id, f64::NAN);
        let err = opt.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("w"));
        assert_eq!(s.value(id).data(), &[0.5]);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn moments_match_parameter_shape() {
        let mut s = ParamStore::<f32>::new();
        let id = s.add("m", Tensor::zeros(&[3, 2]), true);
        s.get_mut(id).grad = Some(Tensor::full(&[3, 2], 1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut s).unwrap();
        let (m, v) = opt.moments(id).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(v.shape(), &[3, 2]);
    }
}
