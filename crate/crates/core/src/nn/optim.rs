use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = store.zeros_like().tensors;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, param) in store.iter_mut().enumerate() {
            let g = &grads.tensors[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                let p = &mut param.value.data[j];
                *p = *p * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let mut grads = store.zeros_like();
        grads.tensors[0] = Tensor::from_vec(1, 2, vec![0.3, -2.0]);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.update(&mut store, &grads);
        let w = store.get(id);
        assert!((w.data[0] - 0.9).abs() < 1e-6);
        assert!((w.data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 1, vec![2.0]));
        let grads = store.zeros_like();
        let mut opt = AdamW::new(&store, 0.5, 0.1);
        opt.update(&mut store, &grads);
        assert!((store.get(id).data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::from_vec(1, 3, vec![3.0, -2.0, 0.5]));
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..2000 {
            let mut grads = store.zeros_like();
            grads.tensors[0] = store.get(id).clone();
            grads.tensors[0].scale_assign(2.0);
            opt.update(&mut store, &grads);
        }
        assert!(store.get(id).sum_sq() < 1e-4);
    }
}
