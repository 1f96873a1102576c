use serde::{Deserialize, Serialize};

use super::graph::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam over a fixed subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step_count: u64,
    params: Vec<ParamId>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let zeros = |id: &ParamId| vec![0.0; store.value(*id).numel()];
        Adam {
            config,
            step_count: 0,
            first_moment: params.iter().map(zeros).collect(),
            second_moment: params.iter().map(zeros).collect(),
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Applies one update from the gradients currently held in `store`.
    /// Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.params.is_empty() {
            log::warn!("adam step with an empty parameter list; nothing to update");
            return;
        }
        self.step_count += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, id) in self.params.iter().enumerate() {
            let (w, g) = store.parts_mut(*id);
            let m = &mut self.first_moment[k];
            let v = &mut self.second_moment[k];
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }

    pub fn second_moment(&self, k: usize) -> &[f64] {
        &self.second_moment[k]
    }
}

/// Clamps every entry of the given parameters into `[-c, c]`.
pub fn clip_weights(store: &mut ParamStore, params: &[ParamId], c: f64) -> Result<()> {
    if c.is_nan() || c <= 0.0 {
        return Err(Error::Contract(format!("clip bound must be positive, got {c}")));
    }
    for id in params {
        for w in store.value_mut(*id) {
            *w = w.clamp(-c, c);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn one_param(w: f64, g: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        let grads = {
            // gradient of g*w is g
            let mut gr = crate::autodiff::Graph::new(&s);
            let v = gr.param(id);
            let l = gr.scale(v, g).unwrap();
            gr.backward(l).unwrap()
        };
        s.accumulate(&grads);
        (s, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = one_param(1.0, 0.5);
        let mut adam = Adam::new(&s, vec![id], AdamConfig::default());
        adam.step(&mut s);
        // m_hat = 0.5, v_hat = 0.25 => update lr * 0.5 / (0.5 + 1e-8)
        let dw = s.value(id).data()[0] - 1.0;
        assert!((dw + 1e-3).abs() < 1e-10, "{dw}");
        assert_eq!(adam.step_count, 1);
        assert_eq!(s.grad(id).data(), &[0.5]);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = one_param(0.7, 0.0);
        let mut adam = Adam::new(&s, vec![id], AdamConfig::default());
        for _ in 0..10 {
            adam.step(&mut s);
        }
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn empty_param_list_is_noop() {
        let mut s = ParamStore::new();
        let mut adam = Adam::new(&s, vec![], AdamConfig::default());
        adam.step(&mut s);
        assert_eq!(adam.step_count, 0);
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![3], vec![1.5, -0.005, -2.0]).unwrap());
        let z = s.add("z", Tensor::zeros(&[2]));
        clip_weights(&mut s, &[id, z], 0.01).unwrap();
        assert_eq!(s.value(id).data(), &[0.01, -0.005, -0.01]);
        assert_eq!(s.value(z).data(), &[0.0, 0.0]);
        assert!(clip_weights(&mut s, &[id], 0.0).is_err());
        assert!(clip_weights(&mut s, &[id], -1.0).is_err());
    }
}
