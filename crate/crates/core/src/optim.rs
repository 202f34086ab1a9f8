//! Adam with optional global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global L2 clip applied to the gradient before the update.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore) -> f32 {
        let norm = store
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, p) in store.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = p.grad.data().to_vec();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j] * clip;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                value[j] -= step_size * m[j] / denom;
            }
        }
        store.zero_grad();
        norm as f32
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.1,
                clip_norm: None,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let x = store.iter().next().unwrap().value.data().to_vec();
            let p = store.iter_mut().next().unwrap();
            p.grad = Tensor::new([2], vec![2.0 * x[0], 2.0 * x[1]]).unwrap();
            adam.step(&mut store);
        }
        let x = store.iter().next().unwrap().value.data().to_vec();
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn step_zeroes_gradients() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new([1], vec![1.0]).unwrap());
        store.iter_mut().next().unwrap().grad = Tensor::new([1], vec![5.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let norm = adam.step(&mut store);
        assert_eq!(norm, 5.0);
        assert_eq!(store.iter().next().unwrap().grad.data(), &[0.0]);
    }
}
