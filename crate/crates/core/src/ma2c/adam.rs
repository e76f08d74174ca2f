use serde::{Deserialize, Serialize};

/// Adam with global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize, clip: f64) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Rescales `grad` in place so its L2 norm is at most `clip`; returns the
    /// norm before clipping.
    pub fn clip_grad(&self, grad: &mut [f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > self.clip {
            let s = self.clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    /// Clips `grad` and applies one update to `params`. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64], lr: f64) -> f64 {
        let norm = self.clip_grad(grad);
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        norm
    }
}

/// Linear decay from `start` to `end` over `total` updates.
pub fn linear_lr(start: f64, end: f64, done: u64, total: u64) -> f64 {
    if total == 0 {
        return start;
    }
    let frac = (done as f64 / total as f64).min(1.0);
    start + (end - start) * frac
}
