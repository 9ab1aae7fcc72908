//! Adam / AdamW with per-prefix learning-rate groups.

use ndarray::ArrayD;

use crate::nn::ParamStore;
use crate::tensor::Gradients;

/// Per-name-prefix learning-rate multiplier. A multiplier of exactly zero
/// freezes the matching parameters: they are skipped entirely, so their
/// values and moments stay bit-identical.
#[derive(Clone, Debug)]
pub struct LrGroup {
    pub prefix: String,
    pub multiplier: f64,
}

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it (plain Adam), nonzero gives
    /// AdamW behaviour.
    pub weight_decay: f64,
    pub groups: Vec<LrGroup>,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            groups: Vec::new(),
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            weight_decay,
            ..AdamConfig::adam(lr)
        }
    }

    pub fn with_group(mut self, prefix: &str, multiplier: f64) -> Self {
        self.groups.push(LrGroup {
            prefix: prefix.to_string(),
            multiplier,
        });
        self
    }

    /// Longest matching prefix wins; no match means multiplier 1.
    fn multiplier_for(&self, name: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for g in &self.groups {
            if name.starts_with(&g.prefix) {
                let len = g.prefix.len();
                if best.map(|(l, _)| len > l).unwrap_or(true) {
                    best = Some((len, g.multiplier));
                }
            }
        }
        best.map(|(_, m)| m).unwrap_or(1.0)
    }
}

pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, _, v)| ArrayD::zeros(v.raw_dim())).collect();
        let v = store.iter().map(|(_, _, vv)| ArrayD::zeros(vv.raw_dim())).collect();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One update over every parameter in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let mult = c.multiplier_for(store.name(id));
            if mult == 0.0 {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let lr = c.lr * mult;
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let value = store.value_mut(id);
            if c.weight_decay > 0.0 {
                let wd = lr * c.weight_decay;
                value.mapv_inplace(|x| x - wd * x);
            }
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|x, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *x -= lr * mhat / (vhat.sqrt() + c.eps);
                });
        }
    }

    /// Set the base learning rate (scheduling hook).
    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Serialize `(step, m, v)` for checkpoint resume.
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "optimizer state length mismatch");
        assert_eq!(v.len(), self.v.len(), "optimizer state length mismatch");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamBuilder, ParamStore};
    use crate::tensor::Tape;
    use ndarray::{ArrayD, IxDyn};

    /// Minimize (w - 3)^2; Adam should get close quickly.
    #[test]
    fn adam_converges_on_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(0, "init");
        let mut pb = ParamBuilder::new(&mut store, "m", &mut rng);
        let w = pb.constant("w", &[1], 0.0);
        let mut opt = Adam::new(AdamConfig::adam(0.1), &store);
        for _ in 0..300 {
            let mut t = Tape::new();
            let wt = t.param(&store, w);
            let target = t.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
            let diff = t.sub(wt, target);
            let loss0 = t.mul(diff, diff);
            let loss = t.sum_all(loss0);
            let grads = t.backward(loss);
            opt.step(&mut store, &grads);
        }
        let final_w = store.value(w)[[0]];
        assert!((final_w - 3.0).abs() < 1e-2, "w = {final_w}");
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(0, "init");
        let mut pb = ParamBuilder::new(&mut store, "m", &mut rng);
        let a = pb.constant("frozen.a", &[1], 1.5);
        let b = pb.constant("live.b", &[1], 1.5);
        let cfg = AdamConfig::adam(0.1).with_group("m.frozen", 0.0);
        let mut opt = Adam::new(cfg, &store);
        for _ in 0..5 {
            let mut t = Tape::new();
            let at = t.param(&store, a);
            let bt = t.param(&store, b);
            let s = t.add(at, bt);
            let sq = t.mul(s, s);
            let loss = t.sum_all(sq);
            let grads = t.backward(loss);
            opt.step(&mut store, &grads);
        }
        assert_eq!(store.value(a)[[0]], 1.5);
        assert_ne!(store.value(b)[[0]], 1.5);
    }

    #[test]
    fn prefix_matching_prefers_longest() {
        let cfg = AdamConfig::adam(1.0)
            .with_group("dac", 0.5)
            .with_group("dac.neck", 2.0);
        assert_eq!(cfg.multiplier_for("dac.neck.q.w"), 2.0);
        assert_eq!(cfg.multiplier_for("dac.decoder.w"), 0.5);
        assert_eq!(cfg.multiplier_for("cfc.w"), 1.0);
    }
}
