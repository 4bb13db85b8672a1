//! Named parameter storage and per-graph binding.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Prefix of every frozen backbone tensor.
pub const BACKBONE_PREFIX: &str = "backbone.";
/// Prefix of every control-branch tensor.
pub const CONTROL_PREFIX: &str = "gcontrol.";

/// Ordered map from parameter name to tensor. Iteration order is the
/// lexicographic name order, which keeps checkpoints and updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| contract_err!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// All entries whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Bit-exact comparison of the entries under `prefix` in both stores.
    pub fn bit_eq_prefix(&self, other: &ParamStore, prefix: &str) -> bool {
        let a: Vec<_> = self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        let b: Vec<_> = other.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).collect();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|((ka, ta), (kb, tb))| ka == kb && ta.bit_eq(tb))
    }
}

/// Parameter initializers.
pub mod init {
    use super::*;

    /// Uniform in `±1/sqrt(fan_in)`, the usual default for linear and conv layers.
    pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
    }

    pub fn conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c_out: usize, c_in: usize, k: usize) {
        let fan_in = c_in * k * k;
        store.insert(format!("{name}.w"), fan_in_uniform(rng, &[c_out, c_in, k, k], fan_in));
        store.insert(format!("{name}.b"), fan_in_uniform(rng, &[c_out], fan_in));
    }

    /// A zero-initialized convolution; `bias` selects whether it carries a bias.
    pub fn zero_conv(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: usize, bias: bool) {
        store.insert(format!("{name}.w"), Tensor::zeros(&[c_out, c_in, k, k]));
        if bias {
            store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        }
    }

    /// Linear layer with weight stored `in × out`.
    pub fn linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) {
        store.insert(format!("{name}.w"), fan_in_uniform(rng, &[d_in, d_out], d_in));
        store.insert(format!("{name}.b"), fan_in_uniform(rng, &[d_out], d_in));
    }

    pub fn zero_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) {
        store.insert(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        store.insert(format!("{name}.b"), Tensor::zeros(&[d_out]));
    }

    pub fn norm_affine(store: &mut ParamStore, name: &str, c: usize) {
        store.insert(format!("{name}.g"), Tensor::ones(&[c]));
        store.insert(format!("{name}.b"), Tensor::zeros(&[c]));
    }
}

/// Registers parameters of a [`ParamStore`] on a [`Graph`] on first use.
///
/// Parameters whose name passes the trainability filter become
/// differentiable leaves; all others are constants and never receive a
/// gradient.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a str>,
    all_trainable: bool,
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl<'a> Binder<'a> {
    /// Nothing trainable (inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: None,
            all_trainable: false,
            vars: HashMap::new(),
            order: Vec::new(),
        }
    }

    /// Only parameters under `prefix` are trainable.
    pub fn trainable_prefix(store: &'a ParamStore, prefix: &'a str) -> Self {
        Self {
            trainable: Some(prefix),
            ..Self::frozen(store)
        }
    }

    pub fn all_trainable(store: &'a ParamStore) -> Self {
        Self {
            all_trainable: true,
            ..Self::frozen(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.all_trainable || self.trainable.is_some_and(|p| name.starts_with(p))
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let t = self.store.require(name)?.clone();
        let v = if self.is_trainable(name) {
            g.leaf(t)
        } else {
            g.constant(t)
        };
        self.vars.insert(name.to_string(), v);
        self.order.push(name.to_string());
        Ok(v)
    }

    /// Gradients of every trainable parameter touched by this forward pass.
    /// Trainable parameters that did not influence the loss get zeros.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.order
            .iter()
            .filter(|n| self.is_trainable(n))
            .map(|n| {
                let v = self.vars[n];
                let t = grads
                    .get(v)
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(n).unwrap().shape()));
                (n.clone(), t)
            })
            .collect()
    }
}

/// Accumulates per-item gradient maps in call order, then averages.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sum: BTreeMap<String, Vec<f64>>,
    shapes: BTreeMap<String, Vec<usize>>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: &BTreeMap<String, Tensor>) {
        for (k, g) in grads {
            let s = self
                .sum
                .entry(k.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            s.iter_mut().zip(g.data()).for_each(|(s, &v)| *s += v as f64);
            self.shapes.entry(k.clone()).or_insert_with(|| g.shape().to_vec());
        }
        self.count += 1;
    }

    pub fn mean(self) -> BTreeMap<String, Tensor> {
        let n = self.count.max(1) as f64;
        self.sum
            .into_iter()
            .map(|(k, s)| {
                let data = s.into_iter().map(|v| (v / n) as f32).collect();
                let t = Tensor::new(&self.shapes[&k], data).expect("accumulated shape");
                (k, t)
            })
            .collect()
    }
}
