//! Named parameter storage with per-parameter trainable flags.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by dotted names (`stage1.enc_g.conv0.w`). Iteration order is
/// lexicographic, which makes checkpoints and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.params.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Replace the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        p.value.expect_same_shape(&value)?;
        p.value = value;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    /// Flip the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Move every parameter of `other` into `self`; names must not collide.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            self.insert(name, p.value, p.trainable)?;
        }
        Ok(())
    }

    /// Sub-store of the parameters whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Fails with the first parameter of `expected` that is absent here or shaped differently.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<()> {
        for (name, p) in expected.iter() {
            let have = self.get(name)?;
            if have.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    have.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Initialisation helpers used by the model builders.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: Rng,
    pub trainable: bool,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, label: &str) -> Self {
        Self {
            store,
            rng: Rng::derive(seed, label),
            trainable: true,
        }
    }

    /// He-uniform conv kernel `out×in×k×k` plus zero bias.
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = self.rng.uniform_tensor(&[c_out, c_in, k, k], -bound, bound);
        self.store.insert(format!("{name}.w"), w, self.trainable)?;
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[c_out]), self.trainable)
    }

    /// Conv whose kernel and bias start at zero.
    pub fn conv_zero(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        self.store
            .insert(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]), self.trainable)?;
        self.store
            .insert(format!("{name}.b"), Tensor::zeros(&[c_out]), self.trainable)
    }

    /// Conv kernel scaled down by `scale` relative to He-uniform.
    pub fn conv_scaled(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, scale: f64) -> Result<()> {
        self.conv(name, c_in, c_out, k)?;
        self.store.get_mut(&format!("{name}.w"))?.scale_in_place(scale);
        Ok(())
    }

    /// Dense `in×out` matrix (row-vector convention `y = x W + b`).
    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        let bound = (3.0 / d_in as f64).sqrt();
        let w = self.rng.uniform_tensor(&[d_in, d_out], -bound, bound);
        self.store.insert(format!("{name}.w"), w, self.trainable)?;
        if bias {
            self.store
                .insert(format!("{name}.b"), Tensor::zeros(&[1, d_out]), self.trainable)?;
        }
        Ok(())
    }

    pub fn tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.store.insert(name, value, self.trainable)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        let t = self.rng.normal_tensor(shape, std);
        self.store.insert(name, t, self.trainable)
    }
}
