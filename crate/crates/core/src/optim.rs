//! Adam with bias correction, no weight decay and no clipping.

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    config: AdamConfig,
    t: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize, config: AdamConfig) -> Result<Self> {
        let ok = config.lr > 0.0
            && (0.0..1.0).contains(&config.beta1)
            && (0.0..1.0).contains(&config.beta2)
            && config.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam hyperparameters {config:?}")));
        }
        Ok(AdamState {
            config,
            t: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. A non-finite gradient leaves `params`
    /// and the state untouched and reports the step it would have been.
    pub fn step(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dims("adam params", self.m.len(), params.len()));
        }
        if grads.len() != self.m.len() {
            return Err(Error::dims("adam grads", self.m.len(), grads.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { step: self.t + 1 });
        }
        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        // lr·m̂/(√v̂ + ε) with m̂ = m/bc1 and v̂ = v/bc2.
        let step_size = T::of(c.lr / bc1);
        let inv_sqrt_bc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(c.eps);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / (v.sqrt() * inv_sqrt_bc2 + eps);
        }
        Ok(())
    }
}
