use std::collections::{BTreeMap, BTreeSet};

use crate::ndarr::{Scalar, Tensor};
use crate::{Error, Result};

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T: Scalar = f32> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]).expect("positive channel count"),
            var: Tensor::ones(&[channels]).expect("positive channel count"),
        }
    }
}

/// Named parameters split into frozen and trainable sets, plus batch-norm
/// running statistics. The statistics are not parameters: they follow the
/// phase of their layer rather than the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
    buffers: BTreeMap<String, BnStats<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, frozen: bool) {
        let name = name.into();
        if frozen {
            self.frozen.insert(name.clone());
        } else {
            self.frozen.remove(&name);
        }
        self.params.insert(name, value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, stats: BnStats<T>) {
        self.buffers.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&BnStats<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown batch-norm buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut BnStats<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("unknown batch-norm buffer `{name}`")))
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `prefix`.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for name in self.params.keys().filter(|n| n.starts_with(prefix)) {
            if frozen {
                self.frozen.insert(name.clone());
            } else {
                self.frozen.remove(name);
            }
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, BnStats<T>> {
        &self.buffers
    }

    pub(crate) fn split_mut(
        &mut self,
    ) -> (
        &BTreeMap<String, Tensor<T>>,
        &BTreeSet<String>,
        &mut BTreeMap<String, BnStats<T>>,
    ) {
        (&self.params, &self.frozen, &mut self.buffers)
    }

    pub(crate) fn frozen_set(&self) -> &BTreeSet<String> {
        &self.frozen
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .keys()
            .filter(|n| !self.frozen.contains(*n))
            .map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Drop every parameter and buffer whose name does not satisfy `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.params.retain(|n, _| keep(n));
        self.frozen.retain(|n| keep(n));
        self.buffers.retain(|n, _| keep(n));
    }

    /// Copy every parameter and buffer of `src` into `self`. Each must already
    /// exist here with the same shape; the frozen flags of `self` are kept.
    pub fn load_values(&mut self, src: &ParamStore<T>) -> Result<()> {
        for (name, t) in &src.params {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if dst.shape() != t.shape() {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
        }
        for (name, s) in &src.buffers {
            let dst = self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected buffer `{name}`")))?;
            if dst.mean.shape() != s.mean.shape() {
                return Err(Error::CheckpointShape {
                    name: format!("{name}.running_mean"),
                    expected: dst.mean.shape().to_vec(),
                    found: s.mean.shape().to_vec(),
                });
            }
            *dst = s.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|(k, b)| {
                    (
                        k.clone(),
                        BnStats {
                            mean: b.mean.cast(),
                            var: b.var.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Bitwise equality of every parameter and buffer.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.frozen == other.frozen
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
            && self.buffers.len() == other.buffers.len()
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|((ka, a), (kb, b))| ka == kb && a.mean.bit_eq(&b.mean) && a.var.bit_eq(&b.var))
    }
}
