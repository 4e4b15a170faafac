use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    /// Decoupled decay applied to `Weight` entries only.
    pub weight_decay: f64,
    pub poly_power: f64,
    pub max_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 1.2e-4,
            momentum: 0.9,
            weight_decay: 0.01,
            poly_power: 1.0,
            max_steps: 300,
        }
    }
}

impl SgdConfig {
    /// `base · (1 − step/max_steps)^power`, zero once the budget is spent.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.max_steps == 0 || step >= self.max_steps {
            return 0.0;
        }
        self.base_lr * (1.0 - step as f64 / self.max_steps as f64).powf(self.poly_power)
    }
}

/// SGD with heavy-ball momentum and decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig, store: &ParamStore) -> Self {
        Sgd {
            config,
            velocity: vec![None; store.len()],
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity[id.index()].as_ref()
    }

    /// `v ← μv + g;  p ← p − lr·λ·p − lr·v` (decay term for weights only).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Tensor)],
        lr: f64,
    ) -> Result<()> {
        let mu = self.config.momentum;
        let decay = self.config.weight_decay;
        for (id, g) in grads {
            let entry = store.entry(*id);
            if !entry.kind.trainable() {
                return Err(Error::invalid(format!("`{}` is not trainable", entry.name)));
            }
            if entry.value.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    entry.name,
                    g.shape(),
                    entry.value.shape()
                )));
            }
            let wd = if entry.kind == ParamKind::Weight {
                decay
            } else {
                0.0
            };
            let v = self.velocity[id.index()]
                .get_or_insert_with(|| Tensor::zeros(g.shape()).expect("valid shape"));
            let p = store.get_mut(*id).data_mut();
            for ((pi, vi), &gi) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi;
                *pi -= lr * wd * *pi + lr * *vi;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> (ParamStore, ParamId, ParamId) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let w = pb.weight("w", &[3], 3).unwrap();
        let b = pb.constant("b", ParamKind::Bias, &[3], 0.5).unwrap();
        (store, w, b)
    }

    #[test]
    fn poly_schedule() {
        let c = SgdConfig {
            base_lr: 0.1,
            max_steps: 10,
            ..SgdConfig::default()
        };
        assert_eq!(c.lr_at(0), 0.1);
        assert!((c.lr_at(5) - 0.05).abs() < 1e-15);
        assert_eq!(c.lr_at(10), 0.0);
    }

    #[test]
    fn zero_lr_is_exact_noop() {
        let (mut st, w, b) = store();
        let before = st.clone();
        let mut opt = Sgd::new(SgdConfig::default(), &st);
        let g = Tensor::full(&[3], 3.7).unwrap();
        opt.step(&mut st, &[(w, g.clone()), (b, g)], 0.0).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn plain_sgd_on_quadratic() {
        // f(p) = p², gradient 2p
        let (mut st, w, _) = store();
        let cfg = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        let mut opt = Sgd::new(cfg, &st);
        let p0 = st.get(w).clone();
        let g = p0.map(|p| 2.0 * p);
        opt.step(&mut st, &[(w, g.clone())], 0.25).unwrap();
        for ((&p1, &p), &gi) in st.get(w).data().iter().zip(p0.data()).zip(g.data()) {
            assert_eq!(p1, p - 0.25 * gi);
        }
    }

    #[test]
    fn decay_skips_non_weights_and_momentum_accumulates() {
        let (mut st, w, b) = store();
        let cfg = SgdConfig {
            momentum: 0.5,
            weight_decay: 0.1,
            ..SgdConfig::default()
        };
        let mut opt = Sgd::new(cfg, &st);
        let zero = Tensor::zeros(&[3]).unwrap();
        let w0 = st.get(w).clone();
        opt.step(&mut st, &[(w, zero.clone()), (b, zero.clone())], 1.0)
            .unwrap();
        for (&a, &b0) in st.get(w).data().iter().zip(w0.data()) {
            assert!((a - 0.9 * b0).abs() < 1e-15);
        }
        assert!(st.get(b).data().iter().all(|&v| v == 0.5));

        let one = Tensor::full(&[3], 1.0).unwrap();
        opt.step(&mut st, &[(b, one.clone())], 1.0).unwrap();
        opt.step(&mut st, &[(b, one)], 1.0).unwrap();
        // v = 1 then 1.5; b = 0.5 − 1 − 1.5
        assert!(st.get(b).data().iter().all(|&v| (v + 2.0).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut st, w, _) = store();
        let mut opt = Sgd::new(SgdConfig::default(), &st);
        assert!(opt
            .step(&mut st, &[(w, Tensor::zeros(&[2]).unwrap())], 0.1)
            .is_err());
    }
}
