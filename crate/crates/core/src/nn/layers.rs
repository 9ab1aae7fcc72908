//! Reusable layers: linear, conv, layer norm, attention blocks.
//!
//! Layers own [`ParamId`]s into a shared [`ParamStore`]; `forward` drives a
//! [`Tape`]. All attention here is single-head — adequate at desk scale and
//! easy to verify against finite differences.

use crate::nn::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{Tape, TensorRef};

/// Dense layer `y = x W + b` on row-token matrices `[T, in] -> [T, out]`.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Linear {
            w: pb.uniform("w", &[d_in, d_out], d_in),
            b: pb.constant("b", &[1, d_out], 0.0),
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        let xw = t.matmul(x, w);
        t.add_rowvec(xw, b)
    }
}

/// Projection without bias, used for attention Q/K/V maps.
pub struct Proj {
    pub w: ParamId,
}

impl Proj {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Proj {
            w: pb.uniform("w", &[d_in, d_out], d_in),
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let w = t.param(store, self.w);
        t.matmul(x, w)
    }
}

/// `x[T,in] -> x W + b` helper when weights are already on the tape.
pub fn linear_rows(t: &mut Tape, x: TensorRef, w: TensorRef, b: TensorRef) -> TensorRef {
    let xw = t.matmul(x, w);
    t.add_rowvec(xw, b)
}

/// Layer normalization over the last axis of `[T, D]` with learnable
/// gain/bias.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| LayerNorm {
            gamma: pb.constant("gamma", &[1, dim], 1.0),
            beta: pb.constant("beta", &[1, dim], 0.0),
            dim,
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        let normed = layer_norm(t, x, self.dim);
        let scaled = t.mul_rowvec(normed, g);
        t.add_rowvec(scaled, b)
    }
}

/// Row-wise standardization `(x - mean) / sqrt(var + eps)` of `[T, D]`.
pub fn layer_norm(t: &mut Tape, x: TensorRef, dim: usize) -> TensorRef {
    let inv_n = 1.0 / dim as f64;
    let sums = t.sum_cols(x);
    let mean = t.scale(sums, inv_n);
    let neg_mean = t.neg(mean);
    let ones = t.leaf(ndarray::ArrayD::ones(ndarray::IxDyn(&[
        t.shape(x)[0],
        dim,
    ])));
    let centered = {
        let bcast = t.mul_colvec(ones, neg_mean);
        t.add(x, bcast)
    };
    let sq = t.mul(centered, centered);
    let var_sum = t.sum_cols(sq);
    let var = t.scale(var_sum, inv_n);
    let var_eps = t.shift(var, 1e-6);
    let std = t.sqrt_t(var_eps);
    let inv_std = t.recip(std);
    t.mul_colvec(centered, inv_std)
}

/// Standard scaled dot-product attention `softmax(QK^T/sqrt(d)) V`.
pub fn scaled_dot_attention(
    t: &mut Tape,
    q: TensorRef,
    k: TensorRef,
    v: TensorRef,
) -> TensorRef {
    let d = t.shape(q)[1] as f64;
    let kt = t.transpose2(k);
    let scores = t.matmul(q, kt);
    let scaled = t.scale(scores, 1.0 / d.sqrt());
    let attn = t.softmax_rows(scaled);
    t.matmul(attn, v)
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        pb.scoped(name, |pb| Mlp {
            fc1: Linear::new(pb, "fc1", d_in, d_hidden),
            fc2: Linear::new(pb, "fc2", d_hidden, d_out),
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let h = self.fc1.forward(t, store, x);
        let h = t.gelu(h);
        self.fc2.forward(t, store, h)
    }
}

/// Pre-LN transformer block: `x + Attn(LN(x))`, `x + MLP(LN(x))`.
pub struct SelfAttentionBlock {
    pub norm1: LayerNorm,
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub out: Proj,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl SelfAttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        pb.scoped(name, |pb| SelfAttentionBlock {
            norm1: LayerNorm::new(pb, "norm1", dim),
            q: Proj::new(pb, "q", dim, dim),
            k: Proj::new(pb, "k", dim, dim),
            v: Proj::new(pb, "v", dim, dim),
            out: Proj::new(pb, "out", dim, dim),
            norm2: LayerNorm::new(pb, "norm2", dim),
            mlp: Mlp::new(pb, "mlp", dim, 2 * dim, dim),
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let n = self.norm1.forward(t, store, x);
        let q = self.q.forward(t, store, n);
        let k = self.k.forward(t, store, n);
        let v = self.v.forward(t, store, n);
        let a = scaled_dot_attention(t, q, k, v);
        let a = self.out.forward(t, store, a);
        let x = t.add(x, a);
        let n2 = self.norm2.forward(t, store, x);
        let m = self.mlp.forward(t, store, n2);
        t.add(x, m)
    }
}

/// Pre-LN cross-attention block: queries attend to a context sequence,
/// followed by a residual MLP on the query side.
pub struct CrossAttentionBlock {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub q: Proj,
    pub k: Proj,
    pub v: Proj,
    pub out: Proj,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim_q: usize, dim_kv: usize, dim: usize) -> Self {
        pb.scoped(name, |pb| CrossAttentionBlock {
            norm_q: LayerNorm::new(pb, "norm_q", dim_q),
            norm_kv: LayerNorm::new(pb, "norm_kv", dim_kv),
            q: Proj::new(pb, "q", dim_q, dim),
            k: Proj::new(pb, "k", dim_kv, dim),
            v: Proj::new(pb, "v", dim_kv, dim),
            out: Proj::new(pb, "out", dim, dim_q),
            norm2: LayerNorm::new(pb, "norm2", dim_q),
            mlp: Mlp::new(pb, "mlp", dim_q, 2 * dim_q, dim_q),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        queries: TensorRef,
        context: TensorRef,
    ) -> TensorRef {
        let nq = self.norm_q.forward(t, store, queries);
        let nkv = self.norm_kv.forward(t, store, context);
        let q = self.q.forward(t, store, nq);
        let k = self.k.forward(t, store, nkv);
        let v = self.v.forward(t, store, nkv);
        let a = scaled_dot_attention(t, q, k, v);
        let a = self.out.forward(t, store, a);
        let x = t.add(queries, a);
        let n2 = self.norm2.forward(t, store, x);
        let m = self.mlp.forward(t, store, n2);
        t.add(x, m)
    }
}

/// 2D convolution on `[C,H,W]` maps via im2col.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub out_ch: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        pb.scoped(name, |pb| Conv2d {
            w: pb.uniform("w", &[out_ch, in_ch * kernel * kernel], in_ch * kernel * kernel),
            b: pb.constant("b", &[1, out_ch], 0.0),
            out_ch,
            in_ch,
            kernel,
            stride,
            pad,
        })
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: TensorRef) -> TensorRef {
        let shape = t.shape(x).to_vec();
        assert_eq!(shape[0], self.in_ch, "Conv2d: channel mismatch");
        let (oh, ow) = self.out_size(shape[1], shape[2]);
        let cols = t.im2col(x, self.kernel, self.kernel, self.stride, self.pad);
        let w = t.param(store, self.w);
        let out = t.matmul(w, cols); // [out_ch, OH*OW]
        let outt = t.transpose2(out); // [OH*OW, out_ch]
        let b = t.param(store, self.b);
        let outb = t.add_rowvec(outt, b);
        let back = t.transpose2(outb);
        t.reshape(back, &[self.out_ch, oh, ow])
    }
}

/// Flatten `[C,H,W]` into row tokens `[H*W, C]`.
pub fn chw_to_tokens(t: &mut Tape, x: TensorRef) -> TensorRef {
    let shape = t.shape(x).to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = t.reshape(x, &[c, h * w]);
    t.transpose2(flat) // [H*W, C]
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw(t: &mut Tape, x: TensorRef, h: usize, w: usize) -> TensorRef {
    let shape = t.shape(x).to_vec();
    let c = shape[1];
    assert_eq!(shape[0], h * w, "tokens_to_chw: token count mismatch");
    let tr = t.transpose2(x); // [C, H*W]
    t.reshape(tr, &[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn rand_leaf(t: &mut Tape, rng: &mut impl Rng, shape: &[usize]) -> TensorRef {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        t.leaf(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap())
    }

    /// FD-check every parameter of a small composite model end to end.
    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(3, "layercheck");
        let mut store = ParamStore::new();
        let mut init_rng = crate::rng::stream(3, "init");
        let mut pb = ParamBuilder::new(&mut store, "t", &mut init_rng);
        let sa = SelfAttentionBlock::new(&mut pb, "sa", 6);
        let ca = CrossAttentionBlock::new(&mut pb, "ca", 6, 4, 6);
        let conv = Conv2d::new(&mut pb, "conv", 2, 3, 3, 1, 1);

        let x_data: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ctx_data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let img_data: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();

        let forward = |store: &ParamStore| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[5, 6]), x_data.clone()).unwrap());
            let ctx = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), ctx_data.clone()).unwrap());
            let img = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4, 4]), img_data.clone()).unwrap());
            let h1 = sa.forward(&mut t, store, x);
            let h2 = ca.forward(&mut t, store, h1, ctx);
            let c = conv.forward(&mut t, store, img);
            let ctok = chw_to_tokens(&mut t, c);
            let csum = t.mean_all(ctok);
            let hsum = t.mean_all(h2);
            let sq1 = t.mul(csum, csum);
            let sq2 = t.mul(hsum, hsum);
            let loss = t.add(sq1, sq2);
            t.scalar(loss)
        };

        // analytic
        let mut t = Tape::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[5, 6]), x_data.clone()).unwrap());
        let ctx = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3, 4]), ctx_data.clone()).unwrap());
        let img = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 4, 4]), img_data.clone()).unwrap());
        let h1 = sa.forward(&mut t, &store, x);
        let h2 = ca.forward(&mut t, &store, h1, ctx);
        let c = conv.forward(&mut t, &store, img);
        let ctok = chw_to_tokens(&mut t, c);
        let csum = t.mean_all(ctok);
        let hsum = t.mean_all(h2);
        let sq1 = t.mul(csum, csum);
        let sq2 = t.mul(hsum, hsum);
        let loss = t.add(sq1, sq2);
        let grads = t.backward(loss);

        let h = 1e-5;
        for (id, name, value) in store.iter() {
            let analytic = grads.get(id);
            for i in 0..value.len() {
                let mut plus = store.clone();
                plus.value_mut(id).as_slice_mut().unwrap()[i] += h;
                let mut minus = store.clone();
                minus.value_mut(id).as_slice_mut().unwrap()[i] -= h;
                let fd = (forward(&plus) - forward(&minus)) / (2.0 * h);
                let an = analytic.map(|a| a.as_slice().unwrap()[i]).unwrap_or(0.0);
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((an - fd) / denom).abs() < 1e-4,
                    "{name}[{i}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv_shapes() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(0, "init");
        let mut pb = ParamBuilder::new(&mut store, "m", &mut rng);
        let conv = Conv2d::new(&mut pb, "c", 3, 8, 4, 4, 0);
        let mut t = Tape::new();
        let mut rng2 = crate::rng::stream(1, "x");
        let x = rand_leaf(&mut t, &mut rng2, &[3, 16, 16]);
        let y = conv.forward(&mut t, &store, x);
        assert_eq!(t.shape(y), &[8, 4, 4]);
    }

    #[test]
    fn token_roundtrip() {
        let mut t = Tape::new();
        let mut rng = crate::rng::stream(2, "x");
        let x = rand_leaf(&mut t, &mut rng, &[3, 4, 5]);
        let tok = chw_to_tokens(&mut t, x);
        assert_eq!(t.shape(tok), &[20, 3]);
        let back = tokens_to_chw(&mut t, tok, 4, 5);
        assert_eq!(t.value(back), t.value(x));
    }
}
