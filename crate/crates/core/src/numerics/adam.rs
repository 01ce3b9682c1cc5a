use std::collections::BTreeMap;

use crate::numerics::params::ParamStore;
use crate::numerics::real::Real;

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily, so parameters may appear after the optimizer does.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_defaults() -> Self {
        Adam::new(1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// One update over every entry in the store using its accumulated
    /// gradients. Gradients are left untouched; callers zero them.
    pub fn step<R: Real>(&mut self, params: &mut ParamStore<R>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let first = &mut self.first;
        let second = &mut self.second;
        params.update_each(|name, value, grad| {
            let n = value.numel();
            let m = first.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = second.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                let g = grad.data()[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let x = value.data()[i].to_f64() - lr * m_hat / (v_hat.sqrt() + eps);
                value.data_mut()[i] = R::from_f64(x);
            }
        });
    }
}
