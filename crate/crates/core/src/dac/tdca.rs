//! Token-dictionary cross-attention.
//!
//! Attention weights come from the cosine similarity between normalized
//! query and key rows, scaled by a learnable temperature tau and passed
//! through a row softmax; the output is the attention-weighted value
//! projection of the prompt pool. Zero-norm rows normalize to the zero
//! vector, so their similarity is 0 rather than NaN.

use crate::nn::{ParamBuilder, ParamId, ParamStore, Proj};
use crate::tensor::{Tape, TensorRef};

/// Floor applied to tau after every optimizer step.
pub const TAU_MIN: f64 = 1e-3;

pub struct TdcaBlock {
    pub wq: Proj,
    pub wk: Proj,
    pub wv: Proj,
    pub tau: ParamId,
}

impl TdcaBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| TdcaBlock {
            wq: Proj::new(pb, "wq", dim, dim),
            wk: Proj::new(pb, "wk", dim, dim),
            wv: Proj::new(pb, "wv", dim, dim),
            tau: pb.constant("tau", &[1], 0.5),
        })
    }

    /// `features [M, D]`, `pool [P, D]` -> enhanced `[M, D]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: TensorRef,
        pool: TensorRef,
    ) -> TensorRef {
        let q = self.wq.forward(tape, store, features);
        let k = self.wk.forward(tape, store, pool);
        let v = self.wv.forward(tape, store, pool);
        let attn = self.attention(tape, store, q, k);
        tape.matmul(attn, v)
    }

    /// The `[M, P]` attention matrix alone (rows sum to 1).
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: TensorRef,
        k: TensorRef,
    ) -> TensorRef {
        let qn = l2_normalize_rows(tape, q);
        let kn = l2_normalize_rows(tape, k);
        let knt = tape.transpose2(kn);
        let sim = tape.matmul(qn, knt); // [M, P] in [-1, 1]
        let tau = tape.param(store, self.tau);
        let tau_safe = tape.clamp_min_const(tau, TAU_MIN);
        let inv_tau = tape.recip(tau_safe);
        let scaled = tape.mul_bscalar(sim, inv_tau);
        tape.softmax_rows(scaled)
    }
}

/// Row-wise L2 normalization with a zero-norm guard: rows with norm below
/// 1e-12 map to the zero vector.
pub fn l2_normalize_rows(tape: &mut Tape, x: TensorRef) -> TensorRef {
    let sq = tape.mul(x, x);
    let sums = tape.sum_cols(sq); // [M, 1]
    let norms = tape.sqrt_t(sums);
    let safe = tape.clamp_min_const(norms, 1e-12);
    let inv = tape.recip(safe);
    tape.mul_colvec(x, inv)
}
