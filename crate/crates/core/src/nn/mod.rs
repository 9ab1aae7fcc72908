//! Parameter storage, initialization, layers, and optimizers.

mod layers;
mod optim;

pub use layers::{
    chw_to_tokens, layer_norm, linear_rows, scaled_dot_attention, tokens_to_chw, Conv2d,
    CrossAttentionBlock, LayerNorm, Linear, Mlp, Proj, SelfAttentionBlock,
};
pub use optim::{Adam, AdamConfig, LrGroup};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// Index of a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered store of named parameter arrays. Registration order is
/// fixed by model construction, which keeps initialization, optimizer
/// updates, and checkpoints deterministic.
#[derive(Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<f64>) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<f64> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Iterate `(id, name, value)` in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<f64>)> {
        self.names
            .iter()
            .zip(self.values.iter())
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Mutable registration context carrying a name prefix and an init stream.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
    rng: &'a mut ChaCha20Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, prefix: &str, rng: &'a mut ChaCha20Rng) -> Self {
        ParamBuilder {
            store,
            prefix: prefix.to_string(),
            rng,
        }
    }

    pub fn scoped<R>(&mut self, sub: &str, f: impl FnOnce(&mut ParamBuilder) -> R) -> R {
        let prefix = format!("{}.{}", self.prefix, sub);
        let mut child = ParamBuilder {
            store: self.store,
            prefix,
            rng: self.rng,
        };
        f(&mut child)
    }

    fn full(&self, name: &str) -> String {
        format!("{}.{}", self.prefix, name)
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Kaiming-style uniform init over `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store
            .register(&self.full(name), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store
            .register(&self.full(name), ArrayD::from_elem(IxDyn(shape), value))
    }

    /// Small-scale normal-ish init used for positional embeddings and prompts.
    pub fn small_normal(&mut self, name: &str, shape: &[usize], scale: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                // sum of three uniforms approximates a normal well enough here
                let s: f64 = (0..3).map(|_| self.rng.random_range(-1.0..1.0)).sum();
                s / 3.0 * scale
            })
            .collect();
        self.store
            .register(&self.full(name), ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }
}
