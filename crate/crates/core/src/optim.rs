//! Adaptive-moment optimiser.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One optimiser instance over any number of parameter stores.
///
/// Moment estimates are keyed by qualified parameter name. Parameters that
/// receive no gradient in a step are left untouched, moments included.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, stores: &mut [&mut ParamStore<T>], grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let step_size = T::c(self.cfg.lr / bc1);
        let bc2_sqrt = T::c(bc2.sqrt());
        let eps = T::c(self.cfg.eps);
        let (b1, b2) = (T::c(b1), T::c(b2));
        for store in stores.iter_mut() {
            let ns = store.namespace().to_string();
            for (local, p) in store.params_mut() {
                let name = format!("{ns}/{local}");
                let Some(g) = grads.get(&name) else { continue };
                assert_eq!(g.shape(), p.shape(), "gradient shape for {name}");
                let m = self
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let v = self
                    .second
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(p.shape()));
                let pd = p.data_mut();
                let (md, vd) = (m.data_mut(), v.data_mut());
                for (i, &gi) in g.data().iter().enumerate() {
                    md[i] = b1 * md[i] + (T::one() - b1) * gi;
                    vd[i] = b2 * vd[i] + (T::one() - b2) * gi * gi;
                    let denom = vd[i].sqrt() / bc2_sqrt + eps;
                    pd[i] -= step_size * md[i] / denom;
                }
            }
        }
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (&self.first, &self.second)
    }

    pub fn restore(
        cfg: AdamConfig,
        step: u64,
        first: BTreeMap<String, Tensor<T>>,
        second: BTreeMap<String, Tensor<T>>,
    ) -> Self {
        Adam {
            cfg,
            step,
            first,
            second,
        }
    }
}
