//! First-order optimizers over leaf tensors.

use crate::tensor::{Array, Tensor};
use std::collections::HashMap;

/// Adaptive moment estimation.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: HashMap<u64, Array>,
    v: HashMap<u64, Array>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (p, g) in params.iter().zip(grads) {
            let g = g.value();
            let m = self.m.entry(p.id()).or_insert_with(|| Array::zeros(g.raw_dim()));
            let v = self.v.entry(p.id()).or_insert_with(|| Array::zeros(g.raw_dim()));
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (&*m, &*v);
            p.update_value(|w| {
                ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                    *w -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                });
            });
        }
    }
}

/// Stochastic gradient descent with momentum and coupled L2 weight decay.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<u64, Array>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, params: &[Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        let (lr, mu, wd) = (self.lr, self.momentum, self.weight_decay);
        for (p, g) in params.iter().zip(grads) {
            let mut d = g.to_array();
            if wd != 0.0 {
                let w = p.value();
                d.zip_mut_with(&w, |d, &w| *d += wd * w);
            }
            let buf = self.velocity.entry(p.id()).or_insert_with(|| Array::zeros(d.raw_dim()));
            buf.zip_mut_with(&d, |b, &d| *b = mu * *b + d);
            let buf = &*buf;
            p.update_value(|w| w.zip_mut_with(buf, |w, &b| *w -= lr * b));
        }
    }
}
