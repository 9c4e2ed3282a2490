//! Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::gemm::NetScalar;
use crate::model::FcDenseNet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: NetScalar> Adam<T> {
    pub fn new(config: AdamConfig, model: &FcDenseNet<T>) -> Self {
        let zeros: Vec<Vec<T>> = model.params().iter().map(|(_, p)| vec![T::zero(); p.len()]).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the accumulated gradients.
    pub fn step(&mut self, model: &mut FcDenseNet<T>, lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let step_size = T::of(lr * (1.0 - c.beta2.powi(t)).sqrt() / (1.0 - c.beta1.powi(t)));
        let eps_hat = T::of(c.eps * (1.0 - c.beta2.powi(t)).sqrt());
        for ((_, p), (m, v)) in model.params_mut().into_iter().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    /// Textbook form: m̂ = m/(1-β1^t), v̂ = v/(1-β2^t), θ -= lr m̂/(√v̂ + ε).
    #[test]
    fn matches_textbook_update() {
        let cfg = ModelConfig { first_conv_filters: 2, growth_rate: 1, down_blocks: vec![1], up_blocks: vec![1], bottleneck_layers: 1, ..ModelConfig::new(Variant::Static) };
        let mut model = FcDenseNet::<f64>::new(cfg, 0).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model);
        let theta0 = model.params()[0].1.value[0];
        let grads = [0.3, -0.1, 0.7];
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, theta0);
        for (t, g) in grads.iter().enumerate() {
            for (_, p) in model.params_mut() {
                p.grad.fill(*g);
            }
            adam.step(&mut model, 1e-2);
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
            theta -= 1e-2 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((model.params()[0].1.value[0] - theta).abs() < 1e-12);
        assert_eq!(adam.steps(), 3);
    }
}
