use serde::{Deserialize, Serialize};

use super::{DenseNet, NnError};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Result<Self, NnError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(NnError::Hyper(format!("learning rate {lr}")));
        }
        Ok(Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] })
    }

    pub fn step(&mut self, net: &mut DenseNet, grad: &[f64]) -> Result<(), NnError> {
        if grad.len() != self.m.len() || net.num_params() != self.m.len() {
            return Err(NnError::Shape(format!("{} gradients for {} moments", grad.len(), self.m.len())));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { layer: net.layer_of(i) });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in net.params_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Slow copy of a network: `target <- (1 - alpha) target + alpha online`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCopy {
    pub net: DenseNet,
    pub alpha: f64,
}

impl TargetCopy {
    pub fn new(online: &DenseNet, alpha: f64) -> Result<Self, NnError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(NnError::Hyper(format!("polyak rate {alpha} outside [0, 1]")));
        }
        Ok(Self { net: online.clone(), alpha })
    }

    pub fn update(&mut self, online: &DenseNet) -> Result<(), NnError> {
        if online.sizes() != self.net.sizes() {
            return Err(NnError::Shape("target and online nets differ".into()));
        }
        let a = self.alpha;
        for (t, o) in self.net.params_mut().iter_mut().zip(online.params()) {
            *t = (1.0 - a) * *t + a * o;
        }
        Ok(())
    }
}
