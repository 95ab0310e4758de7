//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use crate::config::{Precision, RunConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub precision: Precision,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, cfg: &RunConfig) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            precision: cfg.precision,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Gradients for frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name).expect("gradient for unknown parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *w);
                if self.precision == Precision::F32 {
                    *w = *w as f32 as f64;
                }
            }
        }
    }
}

/// Sums per-sample parameter gradients in a fixed order.
#[derive(Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: Vec<(String, Tensor)>) {
        for (name, g) in grads {
            match self.sums.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.sums.insert(name, g);
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradient over the accumulated samples.
    pub fn mean(self) -> Vec<(String, Tensor)> {
        let n = self.count.max(1) as f64;
        self.sums
            .into_iter()
            .map(|(k, mut g)| {
                g.scale_in_place(1.0 / n);
                (k, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::full(&[3], 1.0), true).unwrap();
        store.insert("b", Tensor::full(&[3], 1.0), false).unwrap();
        let mut cfg = RunConfig::default();
        cfg.precision = Precision::F64;
        let mut opt = AdamW::new(0.1, &cfg);
        let g = vec![
            ("a".to_string(), Tensor::full(&[3], 1.0)),
            ("b".to_string(), Tensor::full(&[3], 1.0)),
        ];
        opt.step(&mut store, &g);
        assert_eq!(store.get("b").unwrap().data(), &[1.0; 3]);
        // first Adam step moves by lr * (1 + wd * w)
        let a = store.get("a").unwrap().data()[0];
        assert!((a - (1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 1e-2))).abs() < 1e-12);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(5.0), true).unwrap();
        let mut cfg = RunConfig::default();
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(0.1, &cfg);
        for _ in 0..500 {
            let x = store.get("x").unwrap().item();
            opt.step(&mut store, &[("x".into(), Tensor::scalar(2.0 * (x - 1.0)))]);
        }
        assert!((store.get("x").unwrap().item() - 1.0).abs() < 1e-2);
    }
}
