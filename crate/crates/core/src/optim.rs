//! First-order optimizers over a subset of a [`ParamStore`].

use otg_diff::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};

/// Adam with bias correction, updating only `ids`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ids,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One update from the flat gradient `grad` of the whole store.
    pub fn step(&mut self, store: &mut ParamStore, grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let range = store.slice_of(id);
            let g = &grad[range];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = store.get_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient descent.
pub fn sgd_step(store: &mut ParamStore, ids: &[ParamId], grad: &[f64], lr: f64) {
    for &id in ids {
        let range = store.slice_of(id);
        let g = &grad[range];
        for (w, &gi) in store.get_mut(id).data_mut().iter_mut().zip(g) {
            *w -= lr * gi;
        }
    }
}
