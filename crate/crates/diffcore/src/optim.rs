//! Adam with decoupled weight decay, global-norm clipping and linear warmup.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamStore};
use crate::tensor::{lit, Float};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 3e-2,
            clip_norm: 1.0,
            warmup_steps: 100,
        }
    }
}

impl AdamWConfig {
    /// Constant-with-warmup schedule; `step` is zero-based.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: usize,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let m: Vec<Vec<T>> = store.entries().iter().map(|e| vec![T::zero(); e.value.len()]).collect();
        Self { cfg, v: m.clone(), m, step: 0 }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update of every trainable tensor. Frozen tensors are not touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>) -> StepStats {
        let trainable: Vec<_> = store.trainable().collect();
        let grad_norm = grads.norm(trainable.iter().copied());
        let clip = if grad_norm > self.cfg.clip_norm && grad_norm > 0.0 {
            self.cfg.clip_norm / grad_norm
        } else {
            1.0
        };
        let lr = self.cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (lit::<T>(self.cfg.beta1), lit::<T>(self.cfg.beta2));
        let (one, clip_t) = (T::one(), lit::<T>(clip));
        let step_size = lit::<T>(lr / bc1);
        let inv_bc2_sqrt = lit::<T>(1.0 / bc2.sqrt());
        let eps = lit::<T>(self.cfg.eps);
        let decay = lit::<T>(1.0 - lr * self.cfg.weight_decay);
        for id in trainable {
            let g = grads.get(id).data();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g[i] * clip_t;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let denom = v[i].sqrt() * inv_bc2_sqrt + eps;
                p[i] = p[i] * decay - step_size * m[i] / denom;
            }
        }
        StepStats { grad_norm, lr }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    #[test]
    fn warmup_is_linear_then_constant() {
        let c = AdamWConfig::default();
        assert!((c.lr_at(0) - 1e-6).abs() < 1e-18);
        assert!((c.lr_at(49) - 5e-5).abs() < 1e-18);
        assert_eq!(c.lr_at(99), 1e-4);
        assert_eq!(c.lr_at(5000), 1e-4);
    }

    #[test]
    fn frozen_tensors_bitwise_unchanged() {
        let mut s = ParamStore::<f32>::new(3);
        let a = s.add("a", &[4, 4], Init::NormalScaled).unwrap();
        let b = s.add("b", &[4], Init::NormalScaled).unwrap();
        s.set_frozen(a, true);
        let before = s.get(a).clone();
        let b0 = s.get(b).clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &s);
        let mut g = ParamGrads::zeros_like(&s);
        for v in g.get_mut(a).data_mut() {
            *v = 1.0;
        }
        for v in g.get_mut(b).data_mut() {
            *v = 1.0;
        }
        for _ in 0..10 {
            opt.step(&mut s, &g);
        }
        assert!(s.get(a).bit_eq(&before));
        assert!(!s.get(b).bit_eq(&b0));
    }

    #[test]
    fn clipping_bounds_update_direction() {
        let mut s = ParamStore::<f64>::new(0);
        let a = s.add("a", &[2], Init::Zeros).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig { lr: 1.0, warmup_steps: 0, weight_decay: 0.0, ..Default::default() },
            &s,
        );
        let mut g = ParamGrads::zeros_like(&s);
        g.get_mut(a).data_mut().copy_from_slice(&[300.0, 400.0]);
        let st = opt.step(&mut s, &g);
        assert!((st.grad_norm - 500.0).abs() < 1e-9);
        // First Adam step moves each coordinate by ~lr regardless of scale.
        let p = s.get(a).data();
        assert!((p[0] + 1.0).abs() < 1e-6 && (p[1] + 1.0).abs() < 1e-6);
    }
}
