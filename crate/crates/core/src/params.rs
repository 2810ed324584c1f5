//! Named parameter and buffer registries.
//!
//! A [`Param`] is a shared slot holding the current value of one named weight.
//! Modules keep clones of the slots they use, so an optimizer or EMA update
//! through the registry is immediately visible to the next forward pass.
//! Names are dot-separated paths ("online.backbone.stages.0.blocks.1.attn.qkv.weight"),
//! unique per registry and stable across save/load.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dtype::Scalar;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct ParamInner<E: Scalar> {
    name: String,
    trainable: bool,
    value: RwLock<Tensor<E>>,
}

/// Shared slot for one named weight.
#[derive(Clone)]
pub struct Param<E: Scalar>(Arc<ParamInner<E>>);

impl<E: Scalar> Param<E> {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn trainable(&self) -> bool {
        self.0.trainable
    }

    /// Current value (cheap clone of the shared storage).
    pub fn get(&self) -> Tensor<E> {
        self.0.value.read().unwrap().clone()
    }

    /// Replace the value; the shape is fixed at registration. The tensor is
    /// kept as-is when its grad flag already matches, so callers may hold on
    /// to the exact instance they stored.
    pub fn set(&self, value: Tensor<E>) {
        let mut slot = self.0.value.write().unwrap();
        assert_eq!(slot.shape(), value.shape(), "parameter {} shape is fixed", self.0.name);
        *slot = if value.requires_grad() == self.0.trainable {
            value
        } else if self.0.trainable {
            value.requiring_grad()
        } else {
            value.detach()
        };
    }

    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        let shape = self.shape();
        let t = Tensor::from_vec(data, &shape)?;
        self.set(t);
        Ok(())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.value.read().unwrap().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.0.value.read().unwrap().numel()
    }
}

/// Non-learnable module state (batch-norm running statistics).
#[derive(Clone)]
pub struct Buffer<E: Scalar>(Arc<BufferInner<E>>);

struct BufferInner<E: Scalar> {
    name: String,
    data: RwLock<Vec<E>>,
}

impl<E: Scalar> Buffer<E> {
    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn get(&self) -> Vec<E> {
        self.0.data.read().unwrap().clone()
    }

    pub fn set(&self, data: Vec<E>) {
        let mut slot = self.0.data.write().unwrap();
        assert_eq!(slot.len(), data.len(), "buffer {} length is fixed", self.0.name);
        *slot = data;
    }
}

/// Ordered registry of parameters and buffers for one model.
pub struct ParamSet<E: Scalar> {
    params: Vec<Param<E>>,
    buffers: Vec<Buffer<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Scalar> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new(), buffers: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<E>, trainable: bool) -> Param<E> {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let value = if trainable { value.requiring_grad() } else { value.detach() };
        let param = Param(Arc::new(ParamInner { name: name.clone(), trainable, value: RwLock::new(value) }));
        self.by_name.insert(name, self.params.len());
        self.params.push(param.clone());
        param
    }

    pub fn register_buffer(&mut self, name: impl Into<String>, data: Vec<E>) -> Buffer<E> {
        let name = name.into();
        assert!(
            !self.buffers.iter().any(|b| b.name() == name),
            "duplicate buffer name {name}"
        );
        let buffer = Buffer(Arc::new(BufferInner { name, data: RwLock::new(data) }));
        self.buffers.push(buffer.clone());
        buffer
    }

    pub fn get(&self, name: &str) -> Option<&Param<E>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    /// Parameters in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter().filter(|p| p.trainable())
    }

    pub fn buffers(&self) -> impl Iterator<Item = &Buffer<E>> {
        self.buffers.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Concatenated little-endian bytes of every parameter, in registration
    /// order. Used by tests asserting that a model was not touched.
    pub fn byte_fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            let t = p.get();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Copy values from another registry by identical name. Missing or
    /// shape-mismatched entries are errors.
    pub fn load_values_from(&self, other: &ParamSet<E>) -> Result<()> {
        for p in &self.params {
            let src = other
                .get(p.name())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name())))?;
            p.set(src.get().detach());
        }
        Ok(())
    }
}

/// Parameter factory carrying the registry, a path prefix, and the init RNG.
pub struct Builder<'a, E: Scalar> {
    set: &'a mut ParamSet<E>,
    rng: &'a mut ChaCha8Rng,
    path: String,
    trainable: bool,
}

impl<'a, E: Scalar> Builder<'a, E> {
    pub fn new(set: &'a mut ParamSet<E>, rng: &'a mut ChaCha8Rng, root: &str, trainable: bool) -> Self {
        Builder { set, rng, path: root.to_string(), trainable }
    }

    /// Sub-builder under `self.path + "." + segment`.
    pub fn scope(&mut self, segment: &str) -> Builder<'_, E> {
        let path = if self.path.is_empty() { segment.to_string() } else { format!("{}.{}", self.path, segment) };
        Builder { set: self.set, rng: self.rng, path, trainable: self.trainable }
    }

    fn full_name(&self, leaf: &str) -> String {
        if self.path.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.path, leaf)
        }
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Param<E> {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| {
                let v = loop {
                    let v: f64 = dist.sample(self.rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                };
                E::from_f64(v)
            })
            .collect();
        let t = Tensor::from_vec(data, shape).unwrap();
        self.set.register(self.full_name(leaf), t, self.trainable)
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Param<E> {
        self.set.register(self.full_name(leaf), Tensor::zeros(shape), self.trainable)
    }

    pub fn ones(&mut self, leaf: &str, shape: &[usize]) -> Param<E> {
        self.set.register(self.full_name(leaf), Tensor::ones(shape), self.trainable)
    }

    pub fn buffer(&mut self, leaf: &str, data: Vec<E>) -> Buffer<E> {
        self.set.register_buffer(self.full_name(leaf), data)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    #[test]
    fn registry_round_trip_and_order() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let mut rng = stream(1, tag::INIT, 0, 0);
        let mut b = Builder::new(&mut set, &mut rng, "m", true);
        let w = b.trunc_normal("weight", &[3, 2], 0.02);
        let bias = b.zeros("bias", &[2]);
        assert_eq!(w.name(), "m.weight");
        assert_eq!(bias.name(), "m.bias");
        let names: Vec<&str> = set.iter().map(|p| p.name()).collect();
        assert_eq!(names, vec!["m.weight", "m.bias"]);
        assert!(set.get("m.weight").is_some());

        // Slots are shared: updating through the registry is visible to the clone.
        let slot = set.get("m.bias").unwrap().clone();
        slot.set(Tensor::ones(&[2]));
        assert_eq!(bias.get().data(), &[1.0, 1.0]);
    }

    #[test]
    fn init_is_deterministic_and_truncated() {
        let build = |seed: u64| {
            let mut set: ParamSet<f64> = ParamSet::new();
            let mut rng = stream(seed, tag::INIT, 0, 0);
            let mut b = Builder::new(&mut set, &mut rng, "", true);
            b.trunc_normal("w", &[64, 8], 0.02).get().to_f64_vec()
        };
        assert_eq!(build(9), build(9));
        assert_ne!(build(9), build(10));
        assert!(build(9).iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn non_trainable_params_stay_detached() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let p = set.register("t.w", Tensor::ones(&[2]), false);
        assert!(!p.get().requires_grad());
        p.set(Tensor::var_from_vec(vec![2.0, 2.0], &[2]).unwrap());
        assert!(!p.get().requires_grad(), "set() preserves the trainable flag");
    }
}
