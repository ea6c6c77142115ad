//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use ndarray::Array2;

use super::params::ParamStore;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    /// Names this optimizer is allowed to update; everything else is frozen
    /// structurally, not just by flag.
    allowed: Vec<String>,
}

impl AdamW {
    pub fn new(allowed: Vec<String>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            allowed,
        }
    }

    pub fn allowed(&self) -> &[String] {
        &self.allowed
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for name in self.allowed.clone() {
            let Some(g) = grads.get(&name) else { continue };
            let p = match store.get_mut(&name) {
                Ok(p) => p,
                Err(_) => continue,
            };
            debug_assert!(p.trainable, "optimizer updating frozen parameter {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + eps) + wd * *p);
                });
        }
    }
}
