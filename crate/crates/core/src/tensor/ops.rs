//! Differentiable operations on the tape.
//!
//! Backward closures capture parent node indices plus whatever small state
//! they need and read parent values from the tape when invoked.

use ndarray::{Array2, ArrayD, Axis, IxDyn};

use super::{Tape, TensorRef};

fn as2(v: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality::<ndarray::Ix2>().unwrap()
}

impl Tape {
    fn assert_same_shape(&self, a: TensorRef, b: TensorRef, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.assert_same_shape(a, b, "add");
        let v = &self.values[a.0] + &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |g, _| {
                vec![(a.0, g.clone()), (b.0, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.assert_same_shape(a, b, "sub");
        let v = &self.values[a.0] - &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |g, _| {
                vec![(a.0, g.clone()), (b.0, g.mapv(|x| -x))]
            })),
        )
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        self.assert_same_shape(a, b, "mul");
        let v = &self.values[a.0] * &self.values[b.0];
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                vec![(a.0, g * &vals[b.0]), (b.0, g * &vals[a.0])]
            })),
        )
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(|x| -x);
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.mapv(|x| -x))])))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let v = self.values[a.0].mapv(|x| c * x);
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.mapv(|x| c * x))])))
    }

    /// Add a constant to every element.
    pub fn shift(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let v = self.values[a.0].mapv(|x| x + c);
        self.push(v, Some(Box::new(move |g, _| vec![(a.0, g.clone())])))
    }

    pub fn recip(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(|x| 1.0 / x);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(|x| -1.0 / (x * x));
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn sqrt_t(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(f64::sqrt);
        let out = self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(|x| 0.5 / x.sqrt());
                vec![(a.0, g * &d)]
            })),
        );
        out
    }

    pub fn abs_t(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(f64::abs);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                vec![(a.0, g * &d)]
            })),
        )
    }

    /// Elementwise `x^p` for constant `p`; domain `x >= 0`.
    pub fn powf_const(&mut self, a: TensorRef, p: f64) -> TensorRef {
        let v = self.values[a.0].mapv(|x| x.powf(p));
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(|x| p * x.powf(p - 1.0));
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(stable_sigmoid);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let y = vals[a.0].mapv(stable_sigmoid);
                let d = y.mapv(|s| s * (1.0 - s));
                vec![(a.0, g * &d)]
            })),
        )
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(stable_softplus);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(stable_sigmoid);
                vec![(a.0, g * &d)]
            })),
        )
    }

    /// GELU with the tanh approximation (smooth everywhere, which keeps
    /// finite-difference gradient checks clean).
    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let v = self.values[a.0].mapv(gelu_val);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(gelu_grad);
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn clamp_min_const(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let v = self.values[a.0].mapv(|x| x.max(c));
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let d = vals[a.0].mapv(|x| if x > c { 1.0 } else { 0.0 });
                vec![(a.0, g * &d)]
            })),
        )
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (av, bv) = (as2(&self.values[a.0]), as2(&self.values[b.0]));
        assert_eq!(
            av.shape()[1],
            bv.shape()[0],
            "matmul: inner dims {} vs {}",
            av.shape()[1],
            bv.shape()[0]
        );
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let g2 = as2(g);
                let (av, bv) = (as2(&vals[a.0]), as2(&vals[b.0]));
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                vec![(a.0, da), (b.0, db)]
            })),
        )
    }

    pub fn transpose2(&mut self, a: TensorRef) -> TensorRef {
        let v = as2(&self.values[a.0]).t().to_owned().into_dyn();
        self.push(
            v,
            Some(Box::new(move |g, _| {
                vec![(a.0, as2(g).t().to_owned().into_dyn())]
            })),
        )
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> TensorRef {
        let old: Vec<usize> = self.shape(a).to_vec();
        let v = self.values[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            Some(Box::new(move |g, _| {
                vec![(
                    a.0,
                    g.clone().into_shape_with_order(IxDyn(&old)).unwrap(),
                )]
            })),
        )
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|t| self.values[t.0].view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat0: incompatible shapes");
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let lens: Vec<usize> = parts.iter().map(|t| self.shape(*t)[0]).collect();
        self.push(
            v,
            Some(Box::new(move |g, _| {
                let mut out = Vec::with_capacity(ids.len());
                let mut start = 0;
                for (i, &id) in ids.iter().enumerate() {
                    let part = g
                        .slice_axis(Axis(0), ndarray::Slice::from(start..start + lens[i]))
                        .to_owned();
                    out.push((id, part));
                    start += lens[i];
                }
                out
            })),
        )
    }

    /// Slice `[start, start+len)` along axis 0.
    pub fn narrow0(&mut self, a: TensorRef, start: usize, len: usize) -> TensorRef {
        let full = self.shape(a).to_vec();
        assert!(start + len <= full[0], "narrow0 out of range");
        let v = self.values[a.0]
            .slice_axis(Axis(0), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(
            v,
            Some(Box::new(move |g, _| {
                let mut da = ArrayD::<f64>::zeros(IxDyn(&full));
                da.slice_axis_mut(Axis(0), ndarray::Slice::from(start..start + len))
                    .assign(g);
                vec![(a.0, da)]
            })),
        )
    }

    /// Row-wise softmax of an `[M, N]` matrix.
    pub fn softmax_rows(&mut self, a: TensorRef) -> TensorRef {
        let v = softmax_rows_val(&as2(&self.values[a.0]).to_owned());
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, vals| {
                let y = softmax_rows_val(&as2(&vals[a.0]).to_owned());
                let g2 = as2(g);
                let mut dx = Array2::<f64>::zeros(y.raw_dim());
                for i in 0..y.nrows() {
                    let yi = y.row(i);
                    let gi = g2.row(i);
                    let dot: f64 = yi.iter().zip(gi.iter()).map(|(y, g)| y * g).sum();
                    for j in 0..y.ncols() {
                        dx[[i, j]] = yi[j] * (gi[j] - dot);
                    }
                }
                vec![(a.0, dx.into_dyn())]
            })),
        )
    }

    pub fn sum_all(&mut self, a: TensorRef) -> TensorRef {
        let s = self.values[a.0].sum();
        let shape = self.shape(a).to_vec();
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), s),
            Some(Box::new(move |g, _| {
                vec![(a.0, ArrayD::from_elem(IxDyn(&shape), g[[0]]))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: TensorRef) -> TensorRef {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over axis 1 of an `[M, N]` matrix, keeping shape `[M, 1]`.
    pub fn sum_cols(&mut self, a: TensorRef) -> TensorRef {
        let av = as2(&self.values[a.0]);
        let (m, n) = (av.nrows(), av.ncols());
        let v = av.sum_axis(Axis(1)).into_shape_with_order((m, 1)).unwrap();
        self.push(
            v.into_dyn(),
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut da = Array2::<f64>::zeros((m, n));
                for i in 0..m {
                    let gi = g2[[i, 0]];
                    da.row_mut(i).fill(gi);
                }
                vec![(a.0, da.into_dyn())]
            })),
        )
    }

    /// `a[M,N] + v[1,N]` with broadcast over rows.
    pub fn add_rowvec(&mut self, a: TensorRef, v: TensorRef) -> TensorRef {
        let av = as2(&self.values[a.0]).to_owned();
        let vv = as2(&self.values[v.0]).to_owned();
        assert_eq!(vv.nrows(), 1);
        assert_eq!(av.ncols(), vv.ncols(), "add_rowvec: width mismatch");
        let out = &av + &vv;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let dv = g2.sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                vec![(a.0, g.clone()), (v.0, dv)]
            })),
        )
    }

    /// `a[M,N] * v[1,N]` with broadcast over rows.
    pub fn mul_rowvec(&mut self, a: TensorRef, v: TensorRef) -> TensorRef {
        let av = as2(&self.values[a.0]).to_owned();
        let vv = as2(&self.values[v.0]).to_owned();
        assert_eq!(vv.nrows(), 1);
        assert_eq!(av.ncols(), vv.ncols(), "mul_rowvec: width mismatch");
        let out = &av * &vv;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, vals| {
                let g2 = as2(g);
                let av = as2(&vals[a.0]);
                let vv = as2(&vals[v.0]);
                let da = (&g2 * &vv).into_dyn();
                let dv = (&g2 * &av).sum_axis(Axis(0)).insert_axis(Axis(0)).into_dyn();
                vec![(a.0, da), (v.0, dv)]
            })),
        )
    }

    /// `a[M,N] * v[M,1]` with broadcast over columns.
    pub fn mul_colvec(&mut self, a: TensorRef, v: TensorRef) -> TensorRef {
        let av = as2(&self.values[a.0]).to_owned();
        let vv = as2(&self.values[v.0]).to_owned();
        assert_eq!(vv.ncols(), 1);
        assert_eq!(av.nrows(), vv.nrows(), "mul_colvec: height mismatch");
        let out = &av * &vv;
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, vals| {
                let g2 = as2(g);
                let av = as2(&vals[a.0]);
                let vv = as2(&vals[v.0]);
                let da = (&g2 * &vv).into_dyn();
                let dv = (&g2 * &av).sum_axis(Axis(1)).insert_axis(Axis(1)).into_dyn();
                vec![(a.0, da), (v.0, dv)]
            })),
        )
    }

    /// Multiply every element of `a` by a single-element tensor `s`.
    pub fn mul_bscalar(&mut self, a: TensorRef, s: TensorRef) -> TensorRef {
        assert_eq!(self.values[s.0].len(), 1, "mul_bscalar: s must be scalar");
        let sv = self.scalar(s);
        let v = self.values[a.0].mapv(|x| x * sv);
        self.push(
            v,
            Some(Box::new(move |g, vals| {
                let sv = vals[s.0].iter().copied().next().unwrap();
                let da = g.mapv(|x| x * sv);
                let ds = (g * &vals[a.0]).sum();
                vec![(a.0, da), (s.0, ArrayD::from_elem(IxDyn(&[1]), ds))]
            })),
        )
    }

    /// im2col patch extraction for convolution: `[C,H,W]` input to
    /// `[C*kh*kw, OH*OW]` patch matrix with zero padding.
    pub fn im2col(
        &mut self,
        x: TensorRef,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> TensorRef {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "im2col expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let xv = &self.values[x.0];
        let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
        for oy in 0..oh {
            for ox in 0..ow {
                let col = oy * ow + ox;
                for ci in 0..c {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let row = (ci * kh + ky) * kw + kx;
                            cols[[row, col]] = xv[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
        self.push(
            cols.into_dyn(),
            Some(Box::new(move |g, _| {
                let g2 = as2(g);
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let col = oy * ow + ox;
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let row = (ci * kh + ky) * kw + kx;
                                    dx[[ci, iy as usize, ix as usize]] += g2[[row, col]];
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx)]
            })),
        )
    }

    /// Non-overlapping `k x k` average pooling of `[C,H,W]`.
    pub fn avg_pool2(&mut self, x: TensorRef, k: usize) -> TensorRef {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "avg_pool2 expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert!(h % k == 0 && w % k == 0, "avg_pool2: dims not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let xv = &self.values[x.0];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, oh, ow]));
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            s += xv[[ci, oy * k + dy, ox * k + dx]];
                        }
                    }
                    out[[ci, oy, ox]] = s / (k * k) as f64;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let inv = 1.0 / (k * k) as f64;
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[[ci, oy, ox]] * inv;
                            for dy in 0..k {
                                for dxx in 0..k {
                                    dx[[ci, oy * k + dy, ox * k + dxx]] = gv;
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx)]
            })),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: TensorRef) -> TensorRef {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape.len(), 3, "upsample_nearest2 expects [C,H,W]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let xv = &self.values[x.0];
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, 2 * h, 2 * w]));
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[[ci, y, xx]];
                    out[[ci, 2 * y, 2 * xx]] = v;
                    out[[ci, 2 * y, 2 * xx + 1]] = v;
                    out[[ci, 2 * y + 1, 2 * xx]] = v;
                    out[[ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, _| {
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[[ci, y, xx]] = g[[ci, 2 * y, 2 * xx]]
                                + g[[ci, 2 * y, 2 * xx + 1]]
                                + g[[ci, 2 * y + 1, 2 * xx]]
                                + g[[ci, 2 * y + 1, 2 * xx + 1]];
                        }
                    }
                }
                vec![(x.0, dx)]
            })),
        )
    }
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn stable_softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_val(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_rows_val(a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros(a.raw_dim());
    for (i, row) in a.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out[[i, j]] = e / s;
        }
    }
    out
}
