//! Adam with decoupled weight decay and a cosine learning-rate schedule.

use crate::autodiff::{Grads, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub weight_decay: f64,
    step: u64,
    m: Grads,
    v: Grads,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            step: 0,
            m: Grads::zeros_like(store),
            v: Grads::zeros_like(store),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Decay is applied to every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let b1c = 1.0 - BETA1.powi(self.step as i32);
        let b2c = 1.0 - BETA2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let mh = m[i] / b1c;
                let vh = v[i] / b2c;
                p[i] -= lr * (mh / (vh.sqrt() + EPS) + self.weight_decay * p[i]);
            }
        }
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `max_epochs`.
pub fn cosine_lr(lr_max: f64, lr_min: f64, epoch: usize, max_epochs: usize) -> f64 {
    let frac = epoch.min(max_epochs) as f64 / max_epochs.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(1e-3, 0.0, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 0.0, 100, 100).abs() < 1e-18);
        let mid = cosine_lr(0.3, 0.1, 50, 100);
        assert!((mid - 0.2).abs() < 1e-12);
        for e in 0..100 {
            assert!(cosine_lr(1.0, 0.0, e + 1, 100) <= cosine_lr(1.0, 0.0, e, 100));
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let mut g = Grads::zeros_like(&store);
        g.get_mut(id).copy_from_slice(&[3.0, -0.1, 0.0]);
        let mut opt = AdamW::new(&store, 0.0);
        opt.step(&mut store, &g, 0.01);
        let p = store.get(id).data();
        // bias-corrected first step is lr * g / (|g| + eps)
        assert!((p[0] - (1.0 - 0.01 * 3.0 / (3.0 + EPS))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.01 * 0.1 / (0.1 + EPS))).abs() < 1e-15);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0]).unwrap()).unwrap();
        let g = Grads::zeros_like(&store);
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, &g, 0.5);
        assert!((store.get(id).data()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-15);
        opt.step(&mut store, &g, 0.0);
        assert!((store.get(id).data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0, -4.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store, 0.0);
        for _ in 0..2000 {
            let mut g = Grads::zeros_like(&store);
            let p = store.get(id).data().to_vec();
            g.get_mut(id).copy_from_slice(&[2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)]);
            opt.step(&mut store, &g, 0.01);
        }
        let p = store.get(id).data();
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
    }
}
