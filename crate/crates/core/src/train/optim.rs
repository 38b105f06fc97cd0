use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::ndarr::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Adam with bias correction. Frozen tensors are skipped entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every trainable tensor in `store`. Each must have an
    /// entry in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        let names: Vec<String> = store.trainable_names().map(String::from).collect();
        for name in &names {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Data(format!("no gradient for trainable tensor `{name}`")))?;
            if grad.shape() != store.get(name)?.shape() {
                return Err(Error::Shape(format!("gradient of `{name}` has the wrong shape")));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for name in &names {
            let grad = &grads[name];
            let w = store.get_mut(name)?;
            let zeros = || Tensor::<T>::zeros(grad.shape()).expect("gradient has a valid shape");
            let m = self.m.entry(name.clone()).or_insert_with(zeros);
            let v = self.v.entry(name.clone()).or_insert_with(zeros);
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = gi.as_f64() + c.weight_decay * wi.as_f64();
                let mn = c.beta1 * mi.as_f64() + (1.0 - c.beta1) * g;
                let vn = c.beta2 * vi.as_f64() + (1.0 - c.beta2) * g * g;
                *mi = T::from_f64(mn);
                *vi = T::from_f64(vn);
                let upd = c.lr * (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                *wi = T::from_f64(wi.as_f64() - upd);
            }
        }
        Ok(())
    }
}
