//! Minimal tape-based reverse-mode autodiff over `f64` ndarrays.
//!
//! Every forward pass builds a fresh [`Tape`]; nodes are appended in
//! topological order, so the backward sweep is a single reverse walk. The
//! engine is deliberately small: only the operations the recovery stack
//! needs, all single-threaded and bit-deterministic. Gradients of model
//! parameters are collected per [`crate::nn::ParamId`] after the sweep.
//!
//! Shape errors inside the tape are programmer errors and panic; public
//! module APIs validate their inputs and return typed errors before
//! touching the tape.

mod ops;

pub use ops::stable_sigmoid as sigmoid_scalar;

use ndarray::ArrayD;

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// Backward closure: given the gradient flowing into a node and read-only
/// access to all node values, produce `(parent, contribution)` pairs.
type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[ArrayD<f64>]) -> Vec<(usize, ArrayD<f64>)>>;

pub struct Tape {
    values: Vec<ArrayD<f64>>,
    backs: Vec<Option<BackwardFn>>,
    params: Vec<Option<ParamId>>,
    param_nodes: Vec<Option<TensorRef>>,
}

/// Parameter gradients keyed by [`ParamId`] index.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Global L2 norm over every parameter gradient.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place (gradient clipping).
    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            params: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, t: TensorRef) -> &ArrayD<f64> {
        &self.values[t.0]
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        self.values[t.0].shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, t: TensorRef) -> f64 {
        let v = &self.values[t.0];
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        v.iter().copied().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackwardFn>) -> TensorRef {
        // keep every stored value in standard layout so reshapes and slice
        // views in backward closures never hit layout errors
        self.values.push(to_standard(value));
        self.backs.push(back);
        self.params.push(None);
        TensorRef(self.values.len() - 1)
    }

    /// Constant leaf: participates in the forward pass, receives no gradient.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> TensorRef {
        self.push(value, None)
    }

    /// Trainable leaf backed by a parameter store entry. Repeated requests
    /// for the same parameter return the same node, so gradients from
    /// multiple uses accumulate naturally.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> TensorRef {
        if self.param_nodes.len() < store.len() {
            self.param_nodes.resize(store.len(), None);
        }
        if let Some(t) = self.param_nodes[id.index()] {
            return t;
        }
        let t = self.push(store.value(id).clone(), None);
        self.params[t.0] = Some(id);
        self.param_nodes[id.index()] = Some(t);
        t
    }

    /// Reverse sweep from `loss` (a single-element node). Returns the
    /// gradient of `loss` with respect to every parameter leaf touched by
    /// the forward pass.
    pub fn backward(&self, loss: TensorRef) -> Gradients {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward() requires a scalar loss node"
        );
        let mut node_grads: Vec<Option<ArrayD<f64>>> = vec![None; self.values.len()];
        node_grads[loss.0] = Some(ArrayD::ones(self.values[loss.0].raw_dim()));

        let n_params = self.param_nodes.len();
        let mut param_grads: Vec<Option<ArrayD<f64>>> = (0..n_params).map(|_| None).collect();

        for id in (0..=loss.0).rev() {
            let Some(grad) = node_grads[id].take() else {
                continue;
            };
            if let Some(pid) = self.params[id] {
                match &mut param_grads[pid.index()] {
                    Some(acc) => *acc += &grad,
                    slot => *slot = Some(grad.clone()),
                }
            }
            if let Some(back) = &self.backs[id] {
                for (pid, contrib) in back(&grad, &self.values) {
                    debug_assert!(pid < id, "backward edge must point to an earlier node");
                    let contrib = to_standard(contrib);
                    match &mut node_grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    }
                }
            }
        }
        Gradients { grads: param_grads }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn to_standard(a: ArrayD<f64>) -> ArrayD<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let dim = a.raw_dim();
        ArrayD::from_shape_vec(dim, a.iter().copied().collect()).unwrap()
    }
}
