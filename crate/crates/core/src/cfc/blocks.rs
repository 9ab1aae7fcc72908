//! CFC building blocks: mask-gated scale-wise cross-attention, the
//! U-shaped hierarchical augmenter, residual experts with their soft
//! voting gate, and corruption-aware channel re-weighting.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::nn::{
    chw_to_tokens, scaled_dot_attention, tokens_to_chw, Conv2d, Linear, Mlp, ParamBuilder,
    ParamId, ParamStore, Proj, SelfAttentionBlock,
};
use crate::tensor::{Tape, TensorRef};

/// Bilinear resize of a 2D mask to `(oh, ow)`; no re-thresholding, the
/// result gates features softly.
pub fn resize_mask_bilinear(mask: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    if h == oh && w == ow {
        return mask.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        mask[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + mask[[y0, x1]] * (1.0 - dy) * dx
            + mask[[y1, x0]] * dy * (1.0 - dx)
            + mask[[y1, x1]] * dy * dx
    })
}

/// Scale-wise cross-attention, gated by the interpolated corruption mask:
/// `softmax(QK^T/sqrt(d)) V  *  delta * M'`.
///
/// Queries come from the corruption feature, keys/values from the
/// foundational embedding, through reduced projections. Positions where
/// the interpolated mask is zero emit exactly zero.
pub struct ScaBlock {
    q: Proj,
    k: Proj,
    v: Proj,
}

impl ScaBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_corr: usize,
        c_found: usize,
        rank: usize,
    ) -> Self {
        pb.scoped(name, |pb| ScaBlock {
            q: Proj::new(pb, "q", c_corr, rank),
            k: Proj::new(pb, "k", c_found, rank),
            v: Proj::new(pb, "v", c_found, c_corr),
        })
    }

    /// `f_corr [C,Hj,Wj]`, `f_found [Cf,Hj,Wj]`, `mask` interpolated to
    /// `(Hj,Wj)` outside the tape, `delta` a positive scalar tensor.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_corr: TensorRef,
        f_found: TensorRef,
        mask_j: &Array2<f64>,
        delta: TensorRef,
    ) -> TensorRef {
        let sh = tape.shape(f_corr).to_vec();
        let (hj, wj) = (sh[1], sh[2]);
        assert_eq!(mask_j.shape(), &[hj, wj], "mask not interpolated to scale");
        let q_tokens = chw_to_tokens(tape, f_corr);
        let kv_tokens = chw_to_tokens(tape, f_found);
        let q = self.q.forward(tape, store, q_tokens);
        let k = self.k.forward(tape, store, kv_tokens);
        let v = self.v.forward(tape, store, kv_tokens);
        let attended = scaled_dot_attention(tape, q, k, v); // [M, C]
        // gate: elementwise delta * M', broadcast over channels
        let m_col = tape.leaf(
            ArrayD::from_shape_vec(IxDyn(&[hj * wj, 1]), mask_j.iter().copied().collect())
                .unwrap(),
        );
        let gated = tape.mul_colvec(attended, m_col);
        let scaled = tape.mul_bscalar(gated, delta);
        tokens_to_chw(tape, scaled, hj, wj)
    }
}

/// `lambda * f_aug + (1 - lambda) * f_base`, the learnable residual blend.
pub fn blend_residual(
    tape: &mut Tape,
    f_aug: TensorRef,
    f_base: TensorRef,
    lambda: TensorRef,
) -> TensorRef {
    assert_eq!(
        tape.shape(f_aug),
        tape.shape(f_base),
        "blend_residual: shape mismatch"
    );
    let neg = tape.neg(lambda);
    let one_minus = tape.shift(neg, 1.0);
    let a = tape.mul_bscalar(f_aug, lambda);
    let b = tape.mul_bscalar(f_base, one_minus);
    tape.add(a, b)
}

/// Per-scale blend parameters: `lambda = sigmoid(lambda_raw)` stays in
/// (0,1), `delta = softplus(delta_raw)` stays positive (init 1).
pub struct BlendParams {
    pub lambda_raw: Vec<ParamId>,
    pub delta_raw: Vec<ParamId>,
}

impl BlendParams {
    pub fn new(pb: &mut ParamBuilder, name: &str, scales: usize) -> Self {
        // softplus(0.5413) = 1.0
        let delta_init = (std::f64::consts::E - 1.0f64).ln();
        pb.scoped(name, |pb| BlendParams {
            lambda_raw: (0..scales)
                .map(|j| pb.constant(&format!("lambda{j}"), &[1], 0.0))
                .collect(),
            delta_raw: (0..scales)
                .map(|j| pb.constant(&format!("delta{j}"), &[1], delta_init))
                .collect(),
        })
    }

    pub fn lambda(&self, tape: &mut Tape, store: &ParamStore, j: usize) -> TensorRef {
        let raw = tape.param(store, self.lambda_raw[j]);
        tape.sigmoid(raw)
    }

    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, j: usize) -> TensorRef {
        let raw = tape.param(store, self.delta_raw[j]);
        tape.softplus(raw)
    }
}

/// U-shaped hierarchical augmenter: SCA + blend per scale on the encoder
/// path, upsampling with skip connections on the decoder path, fused map
/// at the finest scale.
pub struct HierAugment {
    pub sca: Vec<ScaBlock>,
    pub blend: BlendParams,
    up_proj: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
}

impl HierAugment {
    /// `corr_channels[j]` / `found_channels[j]` are the pyramid channel
    /// counts at scale j.
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        corr_channels: &[usize],
        found_channels: &[usize],
    ) -> Self {
        let s = corr_channels.len();
        pb.scoped(name, |pb| HierAugment {
            sca: (0..s)
                .map(|j| {
                    ScaBlock::new(
                        pb,
                        &format!("sca{j}"),
                        corr_channels[j],
                        found_channels[j],
                        (corr_channels[j] / 2).max(1),
                    )
                })
                .collect(),
            blend: BlendParams::new(pb, "blend", s),
            up_proj: (0..s - 1)
                .map(|j| {
                    Conv2d::new(
                        pb,
                        &format!("up{j}"),
                        corr_channels[j + 1],
                        corr_channels[j],
                        3,
                        1,
                        1,
                    )
                })
                .collect(),
            fuse: (0..s - 1)
                .map(|j| {
                    Conv2d::new(
                        pb,
                        &format!("fuse{j}"),
                        2 * corr_channels[j],
                        corr_channels[j],
                        3,
                        1,
                        1,
                    )
                })
                .collect(),
        })
    }

    /// `corr_pyramid` and `found_pyramid` share the scale ladder; `mask`
    /// is the full-resolution corruption mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        corr_pyramid: &[TensorRef],
        found_pyramid: &[TensorRef],
        mask: &Array2<f64>,
    ) -> TensorRef {
        let s = corr_pyramid.len();
        assert_eq!(s, found_pyramid.len(), "pyramid ladder mismatch");
        // encoder path: augment every scale
        let mut blended = Vec::with_capacity(s);
        for j in 0..s {
            let sh = tape.shape(corr_pyramid[j]).to_vec();
            let mask_j = resize_mask_bilinear(mask, sh[1], sh[2]);
            let delta = self.blend.delta(tape, store, j);
            let aug = self.sca[j].forward(
                tape,
                store,
                corr_pyramid[j],
                found_pyramid[j],
                &mask_j,
                delta,
            );
            let lambda = self.blend.lambda(tape, store, j);
            blended.push(blend_residual(tape, aug, corr_pyramid[j], lambda));
        }
        // decoder path: coarse to fine with skip connections
        let mut d = blended[s - 1];
        for j in (0..s - 1).rev() {
            let up = tape.upsample_nearest2(d);
            let up = self.up_proj[j].forward(tape, store, up);
            let up = tape.gelu(up);
            let cat = tape.concat0(&[blended[j], up]);
            d = self.fuse[j].forward(tape, store, cat);
            d = tape.gelu(d);
        }
        d
    }
}

/// Preliminary completion: one self-attention block over the frame's
/// augmented tokens plus pooled clip-context tokens.
pub struct CompletionBlock {
    in_proj: Proj,
    ctx_proj: Proj,
    pos: ParamId,
    attn: SelfAttentionBlock,
    out_proj: Linear,
    dim: usize,
}

impl CompletionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c1: usize, dim: usize, grid: usize) -> Self {
        pb.scoped(name, |pb| CompletionBlock {
            in_proj: Proj::new(pb, "in_proj", c1, dim),
            ctx_proj: Proj::new(pb, "ctx_proj", c1, dim),
            pos: pb.small_normal("pos", &[grid, dim], 0.02),
            attn: SelfAttentionBlock::new(pb, "attn", dim),
            out_proj: Linear::new(pb, "out_proj", dim, c1),
            dim,
        })
    }

    /// `fused [C1,H1,W1]`, `context [K, C1]` pooled tokens from the whole
    /// clip. Returns the preliminary feature, same shape as `fused`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: TensorRef,
        context: TensorRef,
    ) -> TensorRef {
        let sh = tape.shape(fused).to_vec();
        let (h1, w1) = (sh[1], sh[2]);
        let toks = chw_to_tokens(tape, fused);
        let mut q = self.in_proj.forward(tape, store, toks);
        let pos = tape.param(store, self.pos);
        q = tape.add(q, pos);
        let ctx = self.ctx_proj.forward(tape, store, context);
        let joint = tape.concat0(&[q, ctx]);
        let refined = self.attn.forward(tape, store, joint);
        let frame_part = tape.narrow0(refined, 0, h1 * w1);
        let delta = self.out_proj.forward(tape, store, frame_part);
        let delta_map = tokens_to_chw(tape, delta, h1, w1);
        tape.add(fused, delta_map)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// One residual expert: positions of the preliminary feature query the
/// shared corruption prompts through cross-attention, and a bias-free
/// feed-forward turns the attended context into a residual update. A zero
/// value projection therefore leaves the input untouched.
pub struct Expert {
    q: Proj,
    k: Proj,
    pub v: Proj,
    ff1: Proj,
    ff2: Proj,
}

impl Expert {
    pub fn new(pb: &mut ParamBuilder, name: &str, c1: usize, dim: usize) -> Self {
        pb.scoped(name, |pb| Expert {
            q: Proj::new(pb, "q", c1, dim),
            k: Proj::new(pb, "k", dim, dim),
            v: Proj::new(pb, "v", dim, dim),
            ff1: Proj::new(pb, "ff1", dim, 2 * dim),
            ff2: Proj::new(pb, "ff2", 2 * dim, c1),
        })
    }

    /// `f_b [C1,H1,W1]`, `prompts [N_p, D]` -> same shape as `f_b`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_b: TensorRef,
        prompts: TensorRef,
    ) -> TensorRef {
        let sh = tape.shape(f_b).to_vec();
        let (h1, w1) = (sh[1], sh[2]);
        let toks = chw_to_tokens(tape, f_b);
        let q = self.q.forward(tape, store, toks);
        let k = self.k.forward(tape, store, prompts);
        let v = self.v.forward(tape, store, prompts);
        let a = scaled_dot_attention(tape, q, k, v); // [M, D]
        let hdn = self.ff1.forward(tape, store, a);
        let hdn = tape.gelu(hdn);
        let upd = self.ff2.forward(tape, store, hdn); // [M, C1]
        let upd_map = tokens_to_chw(tape, upd, h1, w1);
        tape.add(f_b, upd_map)
    }
}

/// Two-layer adaptation of the raw global embedding.
pub struct GlobalAdapter {
    mlp: Mlp,
    out_dim: usize,
}

impl GlobalAdapter {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| GlobalAdapter {
            mlp: Mlp::new(pb, "mlp", d_in, 2 * d_out, d_out),
            out_dim: d_out,
        })
    }

    /// `[1, D_g] -> [1, D_a]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, g: TensorRef) -> TensorRef {
        self.mlp.forward(tape, store, g)
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

/// Soft voting gate over the residual experts.
pub struct VotingGate {
    voter: Mlp,
    pub n_experts: usize,
}

impl VotingGate {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, n_experts: usize) -> Self {
        pb.scoped(name, |pb| VotingGate {
            voter: Mlp::new(pb, "voter", d_in, 2 * d_in, n_experts),
            n_experts,
        })
    }

    /// `[1, D_a] -> [1, N_e]`, rows sum to 1.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, adapted: TensorRef) -> TensorRef {
        let logits = self.voter.forward(tape, store, adapted);
        tape.softmax_rows(logits)
    }
}

/// Gate-weighted sum of expert outputs (broadcast over space and channels).
pub fn more_forward(
    tape: &mut Tape,
    experts: &[Expert],
    store: &ParamStore,
    f_b: TensorRef,
    prompts: TensorRef,
    gate: TensorRef,
) -> TensorRef {
    assert_eq!(
        tape.shape(gate)[1],
        experts.len(),
        "gate width must equal expert count"
    );
    let mut acc: Option<TensorRef> = None;
    for (i, expert) in experts.iter().enumerate() {
        let e = expert.forward(tape, store, f_b, prompts);
        let wi_row = tape.narrow0(gate, 0, 1);
        let wi_full = tape.reshape(wi_row, &[experts.len(), 1]);
        let wi = tape.narrow0(wi_full, i, 1);
        let wi = tape.reshape(wi, &[1]);
        let weighted = tape.mul_bscalar(e, wi);
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted),
        });
    }
    acc.expect("at least one expert")
}

/// Corruption-aware channel re-weighting: the adapted global embedding
/// queries per-channel descriptors of the refined feature; the attended
/// context maps through a two-layer projection and sigmoid to one weight
/// per channel, which multiplies the feature channelwise.
pub struct ChannelEnhance {
    q: Linear,
    k: Linear,
    v: Linear,
    pub mlp: Mlp,
}

impl ChannelEnhance {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, d_att: usize) -> Self {
        pb.scoped(name, |pb| {
            let block = ChannelEnhance {
                q: Linear::new(pb, "q", 1, d_att),
                k: Linear::new(pb, "k", 1, d_att),
                v: Linear::new(pb, "v", 1, d_att),
                mlp: Mlp::new(pb, "mlp", d_att, d_att, channels),
            };
            block
        })
    }

    /// Bias the channel weights toward pass-through (sigmoid(2) = 0.88) so
    /// the block starts close to identity and learns to attenuate.
    pub fn init_pass_through(&self, store: &mut ParamStore) {
        store.value_mut(self.mlp.fc2.b).fill(2.0);
    }

    /// `f_refined [C,H,W]`, `adapted [1, D_a]` -> re-weighted `[C,H,W]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_refined: TensorRef,
        adapted: TensorRef,
    ) -> TensorRef {
        let sh = tape.shape(f_refined).to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        // channel descriptors: global average pool per channel -> [C, 1]
        let flat = tape.reshape(f_refined, &[c, h * w]);
        let sums = tape.sum_cols(flat);
        let gap = tape.scale(sums, 1.0 / (h * w) as f64); // [C, 1]
        let k = self.k.forward(tape, store, gap); // [C, d_att]
        let v = self.v.forward(tape, store, gap);
        // channel pooling of the adapted embedding seeds the query
        let d_a = tape.shape(adapted)[1];
        let a_col = tape.sum_cols(adapted);
        let pooled = tape.scale(a_col, 1.0 / d_a as f64); // [1, 1]
        let q = self.q.forward(tape, store, pooled); // [1, d_att]
        let ctx = scaled_dot_attention(tape, q, k, v); // [1, d_att]
        let weights_logits = self.mlp.forward(tape, store, ctx); // [1, C]
        let weights = tape.sigmoid(weights_logits);
        let w_col = tape.transpose2(weights); // [C, 1]
        let gated = tape.mul_colvec(flat, w_col);
        tape.reshape(gated, &[c, h, w])
    }
}
