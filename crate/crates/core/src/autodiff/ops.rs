//! Forward constructors for every tape operation.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, PadMode};
use crate::tensor::{Scalar, Tensor};

/// Reduction used when collapsing the height axis of a lifted volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CollapseMode {
    #[default]
    Max,
    Avg,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a rank-2 tensor"),
            }),
        }
    }

    fn rank3(&self, op: &'static str, v: Var) -> Result<[usize; 3]> {
        self.value(v).dims3(op)
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(self.shape(a), data).expect("shape checked by caller")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let s = T::of(factor);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).numel() as f64);
        let out = Tensor::scalar(self.value(a).sum() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let mut out = out;
        out.set_requires_grad(false);
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Matrix product of `[M×K]` and `[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let c = kernels::matmul(self.data(a), self.data(b), m, k, n);
        let out = Tensor::from_vec(&[m, n], c)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rank2("transpose", x)?;
        let t = kernels::transpose(self.data(x), rows, cols);
        let out = Tensor::from_vec(&[cols, rows], t)?;
        Ok(self.push(out, Op::Transpose { x, rows, cols }, &[x]))
    }

    /// Affine map on the last axis: `x[..., Din] · w[Din×Dout] + b[Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (din, dout) = self.rank2("linear weight", w)?;
        let xs = self.shape(x).to_vec();
        if *xs.last().expect("non-empty shape") != din {
            return Err(Error::Shape {
                op: "linear",
                lhs: xs,
                rhs: self.shape(w).to_vec(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::Shape {
                    op: "linear bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![dout],
                });
            }
        }
        let rows = self.value(x).numel() / din;
        let mut y = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bias = self.data(b);
            for r in 0..rows {
                y[r * dout..(r + 1) * dout].copy_from_slice(bias);
            }
        }
        kernels::matmul_acc(&mut y, self.data(x), self.data(w), rows, din, dout);
        let mut shape = xs;
        *shape.last_mut().expect("non-empty shape") = dout;
        let out = Tensor::from_vec(&shape, y)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            out,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            &inputs,
        ))
    }

    /// Adds a `[C]` vector to every position of an `[..., C]` tensor.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = *self.shape(x).last().expect("non-empty shape");
        if self.shape(b) != [c] {
            return Err(Error::Shape {
                op: "bias_add",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bias = self.data(b).to_vec();
        let mut out = self.value(x).clone();
        out.set_requires_grad(false);
        for chunk in out.data_mut().chunks_mut(c) {
            kernels::add_into(chunk, &bias);
        }
        Ok(self.push(out, Op::BiasAdd { x, b }, &[x, b]))
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = split_axis(self.shape(x), axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        let mut row = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, r) in row.iter_mut().enumerate() {
                    *r = src[(o * len + l) * inner + i];
                }
                kernels::softmax_row(&mut row);
                for (l, &r) in row.iter().enumerate() {
                    out[(o * len + l) * inner + i] = r;
                }
            }
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Same-size convolution (cross-correlation) of an `(H, W, Cin)` map with
    /// a `(k, k, Cin, Cout)` kernel. Output is `ceil(H/s) × ceil(W/s) × Cout`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: PadMode) -> Result<Var> {
        let [h, w, cin] = self.rank3("conv2d", x)?;
        let (k, kcin, cout) = match *self.shape(kernel) {
            [k1, k2, ci, co] if k1 == k2 => (k1, ci, co),
            ref s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "conv2d kernel must be (k, k, Cin, Cout)".into(),
                })
            }
        };
        if kcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(Error::Invalid(format!("conv2d kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Invalid("conv2d stride must be at least 1".into()));
        }
        let padded_w = match pad {
            PadMode::Zero => w + k - 1,
            PadMode::CircularWidth => w,
        };
        if k > h + k - 1 || k > padded_w {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: format!("kernel of size {k} is larger than the padded input"),
            });
        }
        let geom = ConvGeom {
            h,
            w,
            cin,
            cout,
            k,
            stride,
            pad,
        };
        let y = kernels::conv2d_forward(self.data(x), self.data(kernel), &geom);
        let out = Tensor::from_vec(&[geom.out_h(), geom.out_w(), cout], y)?;
        Ok(self.push(out, Op::Conv2d { x, k: kernel, geom }, &[x, kernel]))
    }

    /// Max over `axis`; ties resolve to the lowest flat index.
    pub fn max_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o * inner + i] = src[best];
                argmax[o * inner + i] = best;
            }
        }
        let out = Tensor::from_vec(&reduced_shape(&shape, axis), out)?;
        Ok(self.push(out, Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn avg_pool_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.data(x);
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                kernels::add_into(&mut out[o * inner..(o + 1) * inner], &src[base..base + inner]);
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&reduced_shape(&shape, axis), out)?;
        Ok(self.push(out, Op::AvgAxis { x, outer, len, inner }, &[x]))
    }

    /// Mean over every axis except the last: `[..., C] → [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let channels = *self.shape(x).last().expect("non-empty shape");
        let positions = self.value(x).numel() / channels;
        let mut out = vec![T::zero(); channels];
        for chunk in self.data(x).chunks(channels) {
            kernels::add_into(&mut out, chunk);
        }
        let inv = T::one() / T::of(positions as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::from_vec(&[channels], out).expect("positive channels");
        self.push(out, Op::GlobalAvg { x, positions, channels }, &[x])
    }

    /// Non-overlapping 2×2 average pooling of an `(H, W, C)` map.
    pub fn avg_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [h, w, c] = self.rank3("avg_pool2x2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidShape {
                shape: vec![h, w, c],
                reason: "2×2 pooling needs even spatial dims".into(),
            });
        }
        let src = self.data(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); oh * ow * c];
        let quarter = T::of(0.25);
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / 2) * ow + xx / 2) * c;
                let s = (y * w + xx) * c;
                kernels::axpy(&mut out[o..o + c], quarter, &src[s..s + c]);
            }
        }
        let out = Tensor::from_vec(&[oh, ow, c], out)?;
        Ok(self.push(out, Op::AvgPool2x2 { x, h, w, c }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling of an `(H, W, C)` map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [h, w, c] = self.rank3("upsample2x", x)?;
        let src = self.data(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((y / 2) * w + xx / 2) * c;
                let o = (y * ow + xx) * c;
                out[o..o + c].copy_from_slice(&src[s..s + c]);
            }
        }
        let out = Tensor::from_vec(&[oh, ow, c], out)?;
        Ok(self.push(out, Op::Upsample2x { x, h, w, c }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let dim = *self.shape(x).last().expect("non-empty shape");
        for p in [gamma, beta] {
            if self.shape(p) != [dim] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = src.len() / dim;
        let n = T::of(dim as f64);
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let istd = T::one() / (var + T::of(EPS)).sqrt();
            inv_std[r] = istd;
            for j in 0..dim {
                let xh = (row[j] - mu) * istd;
                xhat[r * dim + j] = xh;
                out[r * dim + j] = xh * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product attention over already-projected tokens, split
    /// into `heads` groups of channels:
    /// `softmax(Q_h K_hᵀ / √d_head) · V_h`, heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (lq, c) = self.rank2("attention query", q)?;
        let (lk, ck) = self.rank2("attention key", k)?;
        if ck != c || self.shape(v) != self.shape(k) {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.shape(q).to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::Invalid(format!(
                "{c} channels cannot be split into {heads} heads"
            )));
        }
        let d = c / heads;
        let scale = T::one() / T::of(d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * c];
        for h in 0..heads {
            let qh = head_columns(qd, lq, c, h, d);
            let kh = head_columns(kd, lk, c, h, d);
            let vh = head_columns(vd, lk, c, h, d);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            kernels::matmul_nt_acc(p, &qh, &kh, lq, d, lk);
            for row in p.chunks_mut(lk) {
                row.iter_mut().for_each(|s| *s *= scale);
                kernels::softmax_row(row);
            }
            let oh = kernels::matmul(p, &vh, lq, lk, d);
            for i in 0..lq {
                out[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&oh[i * d..(i + 1) * d]);
            }
        }
        let out = Tensor::from_vec(&[lq, c], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                lq,
                lk,
                c,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Selects rows of `x` viewed as `[R × C]` (C = last axis) → `[len × C]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let cols = *self.shape(x).last().expect("non-empty shape");
        let rows = self.value(x).numel() / cols;
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Invalid(format!("row index {bad} out of range for {rows} rows")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::from_vec(&[idx.len(), cols], out)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                cols,
            },
            &[x],
        ))
    }

    /// Stacks `[Ri × C]` (or `[C]`) parts into `[ΣRi × C]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows needs at least one part".into()))?;
        let cols = *self.shape(first).last().expect("non-empty shape");
        let mut out = Vec::new();
        for &p in parts {
            if *self.shape(p).last().expect("non-empty shape") != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            out.extend_from_slice(self.data(p));
        }
        let rows = out.len() / cols;
        let out = Tensor::from_vec(&[rows, cols], out)?;
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Outer product of per-pixel depth probabilities `[H×W×D]` and
    /// features `[H×W×C]` → volume `[H×W×D×C]`.
    pub fn lift_to_3d(&mut self, feat: Var, probs: Var) -> Result<Var> {
        let [h, w, c] = self.rank3("lift_to_3d features", feat)?;
        let [ph, pw, d] = self.rank3("lift_to_3d depth", probs)?;
        if (ph, pw) != (h, w) {
            return Err(Error::Shape {
                op: "lift_to_3d",
                lhs: self.shape(feat).to_vec(),
                rhs: self.shape(probs).to_vec(),
            });
        }
        let (f, p) = (self.data(feat), self.data(probs));
        let mut out = vec![T::zero(); h * w * d * c];
        for px in 0..h * w {
            let fv = &f[px * c..(px + 1) * c];
            for dd in 0..d {
                let o = (px * d + dd) * c;
                kernels::axpy(&mut out[o..o + c], p[px * d + dd], fv);
            }
        }
        let out = Tensor::from_vec(&[h, w, d, c], out)?;
        Ok(self.push(
            out,
            Op::Lift {
                feat,
                probs,
                h,
                w,
                d,
                c,
            },
            &[feat, probs],
        ))
    }

    /// Reduces `[H×W×D×C]` over the height axis → `[D×W×C]`.
    pub fn collapse_height(&mut self, vol: Var, mode: CollapseMode) -> Result<Var> {
        let (h, w, d, c) = match *self.shape(vol) {
            [h, w, d, c] => (h, w, d, c),
            ref s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "collapse_height expects an (H, W, D, C) volume".into(),
                })
            }
        };
        let src = self.data(vol);
        let mut out = vec![T::zero(); d * w * c];
        let mut argmax = match mode {
            CollapseMode::Max => Some(vec![0usize; d * w * c]),
            CollapseMode::Avg => None,
        };
        let inv_h = T::one() / T::of(h as f64);
        for dd in 0..d {
            for ww in 0..w {
                for cc in 0..c {
                    let o = (dd * w + ww) * c + cc;
                    let at = |hh: usize| ((hh * w + ww) * d + dd) * c + cc;
                    match argmax.as_mut() {
                        Some(am) => {
                            let mut best = at(0);
                            for hh in 1..h {
                                if src[at(hh)] > src[best] {
                                    best = at(hh);
                                }
                            }
                            out[o] = src[best];
                            am[o] = best;
                        }
                        None => {
                            out[o] = (0..h).map(|hh| src[at(hh)]).sum::<T>() * inv_h;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[d, w, c], out)?;
        Ok(self.push(
            out,
            Op::CollapseHeight {
                vol,
                h,
                w,
                d,
                c,
                argmax,
            },
            &[vol],
        ))
    }

    /// Half-pixel bilinear resampling of `(H, W, C)` to `(out_h, out_w, C)`.
    pub fn resample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [in_h, in_w, c] = self.rank3("resample_bilinear", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("resample target must be non-empty".into()));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); out_h * out_w * c];
        for_each_bilinear_tap(in_h, in_w, out_h, out_w, |o, s, wgt| {
            kernels::axpy(&mut out[o * c..(o + 1) * c], T::of(wgt), &src[s * c..(s + 1) * c]);
        });
        let out = Tensor::from_vec(&[out_h, out_w, c], out)?;
        Ok(self.push(
            out,
            Op::Resample {
                x,
                in_h,
                in_w,
                out_h,
                out_w,
                c,
            },
            &[x],
        ))
    }

    /// Divides each last-axis row by `‖row‖₂ + eps`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let dim = *self.shape(x).last().expect("non-empty shape");
        let eps = T::of(eps);
        let src = self.data(x);
        let mut norms = Vec::with_capacity(src.len() / dim);
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(dim) {
            let n = kernels::dot(row, row).sqrt();
            norms.push(n);
            let inv = T::one() / (n + eps);
            out.extend(row.iter().map(|&v| v * inv));
        }
        let out = Tensor::from_vec(self.shape(x), out).expect("same shape");
        self.push(out, Op::L2Normalize { x, dim, eps, norms }, &[x])
    }

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.rank2("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![rows, classes],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Invalid(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(classes).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[targets[r]];
            kernels::softmax_row(row);
        }
        let out = Tensor::scalar(loss / T::of(rows as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                classes,
                probs,
            },
            &[logits],
        ))
    }
}

/// Copies the channel block of head `h` out of an `[rows × c]` matrix.
pub(super) fn head_columns<T: Scalar>(m: &[T], rows: usize, c: usize, h: usize, d: usize) -> Vec<T> {
    if d == c {
        return m.to_vec();
    }
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        out.extend_from_slice(&m[r * c + h * d..r * c + (h + 1) * d]);
    }
    out
}

/// Calls `f(out_pixel, src_pixel, weight)` for every non-zero bilinear tap.
pub(super) fn for_each_bilinear_tap(
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    let ty = kernels::bilinear_taps(in_h, out_h);
    let tx = kernels::bilinear_taps(in_w, out_w);
    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
            let o = oy * out_w + ox;
            for (sy, fy) in [(y0, 1.0 - wy), (y1, wy)] {
                if fy == 0.0 {
                    continue;
                }
                for (sx, fx) in [(x0, 1.0 - wx), (x1, wx)] {
                    if fx == 0.0 {
                        continue;
                    }
                    f(o, sy * in_w + sx, fy * fx);
                }
            }
        }
    }
}
