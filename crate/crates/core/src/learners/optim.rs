//! Outer-loop optimizer and learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{Real, Tensor};
use crate::error::{FwsError, Result};
use crate::net::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, lr_step: 10, lr_gamma: 0.5 }
    }
}

impl AdamConfig {
    /// Step-decayed learning rate for `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step.max(1)) as i32)
    }
}

/// Adam with L2 weight decay folded into the gradient.
pub struct Adam<T: Real> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.values().iter().map(|t| vec![T::zero(); t.len()]).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, params: &ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<ParamSet<T>> {
        if grads.len() != params.values().len() {
            return Err(FwsError::Shape(format!("{} gradients for {} parameters", grads.len(), params.values().len())));
        }
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t));
        let (lr, eps, wd) = (T::of(lr), T::of(c.eps), T::of(c.weight_decay));
        let mut flat = Vec::with_capacity(params.total_count());
        for (i, (p, g)) in params.values().iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (&pv, &gv)) in p.data().iter().zip(g.data()).enumerate() {
                let gv = gv + wd * pv;
                m[j] = b1 * m[j] + (T::one() - b1) * gv;
                v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                flat.push(pv - lr * mh / (vh.sqrt() + eps));
            }
        }
        params.unflatten(&flat)
    }
}

/// Plain gradient descent, used for inner updates at inference.
pub fn sgd<T: Real>(params: &ParamSet<T>, grads: &[Tensor<T>], lr: f64) -> Result<ParamSet<T>> {
    let lr = T::of(lr);
    let flat: Vec<T> = params
        .values()
        .iter()
        .zip(grads)
        .flat_map(|(p, g)| p.data().iter().zip(g.data()).map(move |(&a, &b)| a - lr * b).collect::<Vec<_>>())
        .collect();
    params.unflatten(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetConfig, UNet};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let net = UNet::new(NetConfig { base_width: 1, levels: 1, convs_per_level: 1, ..NetConfig::default() }).unwrap();
        let p = net.init::<f64>(0);
        let grads: Vec<_> = p.values().iter().map(|t| Tensor::full(t.shape(), 3.0)).collect();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let q = opt.step(&p, &grads, 0.01).unwrap();
        for (a, b) in p.flatten().iter().zip(q.flatten()) {
            assert!((a - b - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn step_schedule() {
        let c = AdamConfig { lr: 1.0, lr_step: 2, lr_gamma: 0.1, ..AdamConfig::default() };
        assert_eq!(c.lr_at(0), 1.0);
        assert_eq!(c.lr_at(1), 1.0);
        assert!((c.lr_at(2) - 0.1).abs() < 1e-15);
        assert!((c.lr_at(5) - 0.01).abs() < 1e-15);
    }
}
