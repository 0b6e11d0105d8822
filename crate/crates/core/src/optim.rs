//! Adam with a linearly decaying learning rate.

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

/// Linear decay from `start` at step 0 to `end` at step `steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDecay {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl LinearDecay {
    pub fn new(start: f64, end: f64, steps: usize) -> Result<Self> {
        if !(end > 0.0 && start >= end && start.is_finite()) {
            return Err(Error::validation(format!("learning rates must satisfy start >= end > 0, got {start} and {end}")));
        }
        if steps == 0 {
            return Err(Error::validation("at least one step is required"));
        }
        Ok(LinearDecay { start, end, steps })
    }

    /// The endpoints are returned as given, not interpolated. A single-step
    /// run uses `start`.
    pub fn lr(&self, step: usize) -> f64 {
        if step == 0 {
            self.start
        } else if step + 1 >= self.steps {
            self.end
        } else {
            let f = step as f64 / (self.steps - 1) as f64;
            self.start + (self.end - self.start) * f
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, indexed like the store's parameters.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Frozen parameters are not touched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.trainable() {
            let p = store.get_mut(id);
            if !p.grad.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
            let (m, v) = (self.m[id.0].data_mut(), self.v[id.0].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
