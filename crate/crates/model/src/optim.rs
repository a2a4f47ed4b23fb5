//! Adam with moment buffers shaped like the parameters they track.

use std::marker::PhantomData;

use serde::{Deserialize, Serialize};

use crate::nets::Parameters;
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F, P> {
    pub m: P,
    pub v: P,
    /// Number of updates applied so far.
    pub t: u64,
    _elem: PhantomData<F>,
}

impl<F: Real, P: Parameters<F>> Adam<F, P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            _elem: PhantomData,
        }
    }

    pub fn from_moments(m: P, v: P, t: u64) -> Self {
        Self {
            m,
            v,
            t,
            _elem: PhantomData,
        }
    }

    /// One bias-corrected update with step size `lr`.
    pub fn step(&mut self, config: &AdamConfig, lr: f64, params: &mut P, grads: &P) {
        self.t += 1;
        let t = self.t as i32;
        let b1 = F::lit(config.beta1);
        let b2 = F::lit(config.beta2);
        let one = F::one();
        let step = F::lit(lr * (1.0 - config.beta2.powi(t)).sqrt() / (1.0 - config.beta1.powi(t)));
        let eps = F::lit(config.eps);
        let grads = grads.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((p, (_, _, g)), m), v) in params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs) {
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi -= step * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
