use crate::autodiff::ParamGroup;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { lr, beta1, beta2, eps: 1e-8, weight_decay, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    /// Architecture-logit settings: betas (0.5, 0.999), weight decay 1e-5.
    pub fn for_architecture(n: usize, lr: f64) -> Self {
        Self::new(n, lr, 0.5, 0.999, 1e-5)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `θ ← θ − lr·(wd·θ + m̂/(√v̂ + δ))` with bias-corrected moments.
    pub fn step(&mut self, params: &ParamGroup<T>, grad: &[T]) -> Result<ParamGroup<T>> {
        if grad.len() != self.m.len() || params.numel() != self.m.len() {
            return Err(Error::LengthMismatch { expected: self.m.len(), actual: grad.len() });
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.t as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (T::lit(self.lr), T::lit(self.weight_decay), T::lit(self.eps));
        let mut theta = params.flatten();
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            if self.lr == 0.0 {
                continue;
            }
            let step = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
            theta[i] = theta[i] - lr * (wd * theta[i] + step);
        }
        params.unflatten(&theta)
    }
}
