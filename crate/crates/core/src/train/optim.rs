//! Adam with a linearly decaying learning rate.

use crate::tensor::Tensor;

/// Learning rate falling linearly from `start` at step 0 to `end` at the
/// last of `total` steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearDecay {
    pub start: f64,
    pub end: f64,
    pub total: usize,
}

impl LinearDecay {
    pub fn at(&self, step: usize) -> f64 {
        if self.total <= 1 {
            return self.start;
        }
        let frac = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u32,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates completed so far.
    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                pd[i] -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
    }
}
