//! AdamW with per-group learning-rate multipliers.

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub backbone_multiplier: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            backbone_multiplier: 0.1,
            clip_norm: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| Tensor::zeros(e.value.rows(), e.value.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Global L2 norm of all gradients.
    pub fn grad_norm(grads: &Gradients) -> f64 {
        grads
            .grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// One update at `lr * lr_scale` (schedule factor).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr_scale: f64) {
        self.t += 1;
        let c = &self.cfg;
        let norm = Self::grad_norm(grads);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, entry) in store.entries_mut().iter_mut().enumerate() {
            let Some(g) = grads.grads.get(k).and_then(|g| g.as_ref()) else {
                continue;
            };
            let group = match entry.group {
                ParamGroup::Backbone => c.backbone_multiplier,
                ParamGroup::Head => 1.0,
            };
            let lr = c.lr * lr_scale * group;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = entry.value.data_mut();
            for i in 0..w.len() {
                let gi = g.data()[i] * clip;
                let mi = c.beta1 * m.data()[i] + (1.0 - c.beta1) * gi;
                let vi = c.beta2 * v.data()[i] + (1.0 - c.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = (mi / bc1) / ((vi / bc2).sqrt() + c.eps);
                w[i] -= lr * (update + c.weight_decay * w[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::nn::ParamGroup;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Head, Tensor::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..AdamWConfig::default()
            },
            &store,
        );
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x);
            let loss = g.sum(sq);
            let grads = g.backward(loss, store.len());
            opt.step(&mut store, &grads, 1.0);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn backbone_group_moves_slower() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Head, Tensor::scalar(1.0));
        let b = store.add("b", ParamGroup::Backbone, Tensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let grads = Gradients {
            grads: vec![Some(Tensor::scalar(0.01)), Some(Tensor::scalar(0.01))],
        };
        opt.step(&mut store, &grads, 1.0);
        let da = 1.0 - store.get(a).item();
        let db = 1.0 - store.get(b).item();
        assert!((da / db - 10.0).abs() < 0.2, "{da} {db}");
    }
}
