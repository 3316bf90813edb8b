//! First-order optimizers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::graph::Mat;
use crate::params::{Grads, ParamStore};

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads);
    fn steps_taken(&self) -> u64;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        AdamW {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let i = id.index();
            let p = store.get_mut(id);
            if c.weight_decay > 0.0 {
                p.mapv_inplace(|w| w * (1.0 - c.lr * c.weight_decay));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
            });
        }
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamaxConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamaxConfig {
    fn default() -> Self {
        AdamaxConfig {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam variant using the infinity norm for the second moment.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub config: AdamaxConfig,
    m: Vec<Mat>,
    u: Vec<Mat>,
    t: u64,
}

impl Adamax {
    pub fn new(config: AdamaxConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Mat> = store.iter().map(|(_, p)| Mat::zeros(p.dim())).collect();
        Adamax {
            config,
            m: zeros.clone(),
            u: zeros,
            t: 0,
        }
    }
}

impl Optimizer for Adamax {
    fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c = self.config;
        let step = c.lr / (1.0 - c.beta1.powi(self.t as i32));
        for (id, g) in grads.iter() {
            let i = id.index();
            let m = &mut self.m[i];
            let u = &mut self.u[i];
            ndarray::Zip::from(store.get_mut(id))
                .and(m)
                .and(u)
                .and(g)
                .for_each(|w, m, u, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *u = (c.beta2 * *u).max(g.abs() + c.eps);
                    *w -= step * *m / *u;
                });
        }
    }

    fn steps_taken(&self) -> u64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;
    use ndarray::array;

    fn quadratic_grads(store: &ParamStore) -> Grads {
        // f(w) = sum (w - 3)^2
        let mut g = Grads::empty(1);
        g.set(
            ParamId::from_index(0),
            store.get(ParamId::from_index(0)).mapv(|w| 2.0 * (w - 3.0)),
        );
        g
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", array![[0.0, 10.0]]);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..500 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        for &w in store.get(ParamId::from_index(0)) {
            assert!((w - 3.0).abs() < 1e-2, "w = {w}");
        }
    }

    #[test]
    fn adamax_minimizes_quadratic() {
        let mut store = ParamStore::new();
        store.add("w", array![[0.0, 10.0]]);
        let cfg = AdamaxConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = Adamax::new(cfg, &store);
        for _ in 0..500 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        for &w in store.get(ParamId::from_index(0)) {
            assert!((w - 3.0).abs() < 1e-2, "w = {w}");
        }
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", array![[1.0]]);
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Grads::empty(1);
        g.set(ParamId::from_index(0), array![[5.0]]);
        opt.step(&mut store, &g);
        let w = store.get(ParamId::from_index(0))[[0, 0]];
        assert!((w - 0.99).abs() < 1e-8);
    }
}
