//! AdamW with decoupled weight decay and a step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: f64,
    /// Steps at which the rate is multiplied by `factor`; strictly increasing.
    pub decay_steps: Vec<usize>,
    pub factor: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::Config("learning rate and decay factor must be positive, factor at most 1".into()));
        }
        if self.decay_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("decay steps must be strictly increasing".into()));
        }
        Ok(())
    }

    /// Rate in effect for 0-based `step`.
    pub fn rate(&self, step: usize) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Biases and one-dimensional parameters skip weight decay.
    decay: Vec<bool>,
    t: i32,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            decay: store.iter().map(|p| p.value.shape.len() > 1).collect(),
            t: 0,
        }
    }

    /// Applies one update; `grads` is indexed like the store.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, eps) = (T::one(), T::of(c.eps));
        let step = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut store.get_mut(ParamId(i)).value.data;
            if self.decay[i] {
                let keep = T::of(1.0 - lr * c.weight_decay);
                p.iter_mut().for_each(|x| *x = *x * keep);
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                p[j] = p[j] - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|v| *v = *v * s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_divides_by_ten_at_each_decay_point() {
        let s = Schedule {
            initial: 1e-4,
            decay_steps: vec![100, 200],
            factor: 0.1,
        };
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert!(close(s.rate(0), 1e-4) && close(s.rate(99), 1e-4));
        assert!(close(s.rate(100), 1e-5) && close(s.rate(199), 1e-5));
        assert!(close(s.rate(200), 1e-6) && close(s.rate(10_000), 1e-6));
        assert!(Schedule { decay_steps: vec![5, 5], ..s }.validate().is_err());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::new(vec![2, 1], vec![3.0, -2.0]));
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            let w = store.get(ParamId(0)).value.data.clone();
            let g = vec![w.iter().map(|x| 2.0 * (x - 1.0)).collect()];
            opt.step(&mut store, &g, 0.01);
        }
        for x in &store.get(ParamId(0)).value.data {
            assert!((x - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", Tensor::new(vec![1, 1], vec![2.0]));
        store.push("b", Tensor::new(vec![1], vec![2.0]));
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.5, ..Default::default() });
        opt.step(&mut store, &[vec![0.0], vec![0.0]], 0.1);
        assert!((store.get(ParamId(0)).value.data[0] - 1.9).abs() < 1e-12);
        assert_eq!(store.get(ParamId(1)).value.data[0], 2.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0f64], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[1][0] - 0.8).abs() < 1e-12);
    }
}
