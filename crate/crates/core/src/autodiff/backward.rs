//! Backward rules: given the output gradient of node `i`, return the
//! gradient contribution for each of its inputs.

use super::ops::{for_each_bilinear_tap, head_columns};
use super::{Graph, Op, Var};
use crate::kernels;
use crate::tensor::Scalar;

type Contributions<T> = Vec<(Var, Vec<T>)>;

impl<T: Scalar> Graph<T> {
    pub(super) fn backward_node(&self, i: usize, gy: &[T]) -> Contributions<T> {
        let want = |v: Var| self.needs_grad(v);
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, gy.to_vec()), (*b, gy.to_vec())],
            Op::Sub(a, b) => vec![(*a, gy.to_vec()), (*b, gy.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                vec![
                    (*a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect()),
                    (*b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, gy.iter().map(|&g| g * *s).collect())],
            Op::Sum(a) => vec![(*a, vec![gy[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![gy[0] / T::of(n as f64); n])]
            }
            Op::Reshape(a) => vec![(*a, gy.to_vec())],
            Op::Relu(a) => {
                let x = self.data(*a);
                let dx = gy
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*a, dx)]
            }
            &Op::MatMul { a, b, m, k, n } => {
                let mut out = Vec::new();
                if want(a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(&mut da, gy, self.data(b), m, n, k);
                    out.push((a, da));
                }
                if want(b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(&mut db, self.data(a), gy, m, k, n);
                    out.push((b, db));
                }
                out
            }
            &Op::Transpose { x, rows, cols } => {
                vec![(x, kernels::transpose(gy, cols, rows))]
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            } => {
                let mut out = Vec::new();
                if want(x) {
                    let mut dx = vec![T::zero(); rows * din];
                    kernels::matmul_nt_acc(&mut dx, gy, self.data(w), rows, dout, din);
                    out.push((x, dx));
                }
                if want(w) {
                    let mut dw = vec![T::zero(); din * dout];
                    kernels::matmul_tn_acc(&mut dw, self.data(x), gy, rows, din, dout);
                    out.push((w, dw));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.chunks(dout) {
                        kernels::add_into(&mut db, row);
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::BiasAdd { x, b } => {
                let c = self.value(b).numel();
                let mut db = vec![T::zero(); c];
                for row in gy.chunks(c) {
                    kernels::add_into(&mut db, row);
                }
                vec![(x, gy.to_vec()), (b, db)]
            }
            &Op::Softmax { x, outer, len, inner } => {
                // dx = s ⊙ (dy − ⟨dy, s⟩) along the axis
                let s = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + ii;
                        let dotp: T = (0..len).map(|l| gy[at(l)] * s[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = s[at(l)] * (gy[at(l)] - dotp);
                        }
                    }
                }
                vec![(x, dx)]
            }
            &Op::Conv2d { x, k, ref geom } => {
                let (dx, dk) = kernels::conv2d_backward(self.data(x), self.data(k), gy, geom, want(x), want(k));
                dx.map(|g| (x, g)).into_iter().chain(dk.map(|g| (k, g))).collect()
            }
            Op::MaxAxis { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&src, &g) in argmax.iter().zip(gy) {
                    dx[src] += g;
                }
                vec![(*x, dx)]
            }
            &Op::AvgAxis { x, outer, len, inner } => {
                let inv = T::one() / T::of(len as f64);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        kernels::axpy(&mut dx[base..base + inner], inv, &gy[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(x, dx)]
            }
            &Op::GlobalAvg { x, positions, channels } => {
                let inv = T::one() / T::of(positions as f64);
                let mut dx = Vec::with_capacity(positions * channels);
                for _ in 0..positions {
                    dx.extend(gy.iter().map(|&g| g * inv));
                }
                vec![(x, dx)]
            }
            &Op::AvgPool2x2 { x, h, w, c } => {
                let (ow, quarter) = (w / 2, T::of(0.25));
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / 2) * ow + xx / 2) * c;
                        let s = (y * w + xx) * c;
                        kernels::axpy(&mut dx[s..s + c], quarter, &gy[o..o + c]);
                    }
                }
                vec![(x, dx)]
            }
            &Op::Upsample2x { x, h, w, c } => {
                let ow = 2 * w;
                let mut dx = vec![T::zero(); h * w * c];
                for y in 0..2 * h {
                    for xx in 0..ow {
                        let s = ((y / 2) * w + xx / 2) * c;
                        let o = (y * ow + xx) * c;
                        kernels::add_into(&mut dx[s..s + c], &gy[o..o + c]);
                    }
                }
                vec![(x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                dim,
                xhat,
                inv_std,
            } => {
                let dim = *dim;
                let g = self.data(*gamma);
                let n = T::of(dim as f64);
                let mut dx = vec![T::zero(); xhat.len()];
                let mut dgamma = vec![T::zero(); dim];
                let mut dbeta = vec![T::zero(); dim];
                let mut dxhat = vec![T::zero(); dim];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    let (gyr, xhr) = (&gy[span.clone()], &xhat[span.clone()]);
                    for j in 0..dim {
                        dxhat[j] = gyr[j] * g[j];
                        dgamma[j] += gyr[j] * xhr[j];
                        dbeta[j] += gyr[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = kernels::dot(&dxhat, xhr) / n;
                    for j in 0..dim {
                        dx[r * dim + j] = istd * (dxhat[j] - mean_d - xhr[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                lq,
                lk,
                c,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, *lq, *lk, *c, probs, gy),
            Op::GatherRows { x, idx, cols } => {
                let cols = *cols;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    kernels::add_into(&mut dx[src * cols..(src + 1) * cols], &gy[r * cols..(r + 1) * cols]);
                }
                vec![(*x, dx)]
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let g = gy[offset..offset + n].to_vec();
                        offset += n;
                        (p, g)
                    })
                    .collect()
            }
            &Op::Lift {
                feat,
                probs,
                h,
                w,
                d,
                c,
            } => {
                let (f, p) = (self.data(feat), self.data(probs));
                let mut dfeat = vec![T::zero(); h * w * c];
                let mut dprobs = vec![T::zero(); h * w * d];
                for px in 0..h * w {
                    let fv = &f[px * c..(px + 1) * c];
                    for dd in 0..d {
                        let o = (px * d + dd) * c;
                        let g = &gy[o..o + c];
                        dprobs[px * d + dd] = kernels::dot(g, fv);
                        kernels::axpy(&mut dfeat[px * c..(px + 1) * c], p[px * d + dd], g);
                    }
                }
                vec![(feat, dfeat), (probs, dprobs)]
            }
            Op::CollapseHeight {
                vol,
                h,
                w,
                d,
                c,
                argmax,
            } => {
                let (h, w, d, c) = (*h, *w, *d, *c);
                let mut dv = vec![T::zero(); h * w * d * c];
                match argmax {
                    Some(am) => {
                        for (&src, &g) in am.iter().zip(gy) {
                            dv[src] += g;
                        }
                    }
                    None => {
                        let inv = T::one() / T::of(h as f64);
                        for dd in 0..d {
                            for ww in 0..w {
                                for cc in 0..c {
                                    let g = gy[(dd * w + ww) * c + cc] * inv;
                                    for hh in 0..h {
                                        dv[((hh * w + ww) * d + dd) * c + cc] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*vol, dv)]
            }
            &Op::Resample {
                x,
                in_h,
                in_w,
                out_h,
                out_w,
                c,
            } => {
                let mut dx = vec![T::zero(); in_h * in_w * c];
                for_each_bilinear_tap(in_h, in_w, out_h, out_w, |o, s, wgt| {
                    kernels::axpy(&mut dx[s * c..(s + 1) * c], T::of(wgt), &gy[o * c..(o + 1) * c]);
                });
                vec![(x, dx)]
            }
            Op::L2Normalize { x, dim, eps, norms } => {
                // dx = (dy − ⟨dy, y⟩ · x / ‖x‖) / (‖x‖ + ε)
                let dim = *dim;
                let src = self.data(*x);
                let y = self.nodes[i].value.data();
                let mut dx = vec![T::zero(); src.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let span = r * dim..(r + 1) * dim;
                    let inv = T::one() / (n + *eps);
                    let proj = if n > T::zero() {
                        kernels::dot(&gy[span.clone()], &y[span.clone()]) / n
                    } else {
                        T::zero()
                    };
                    for j in span {
                        dx[j] = (gy[j] - proj * src[j]) * inv;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                classes,
                probs,
            } => {
                let rows = targets.len();
                let scale = gy[0] / T::of(rows as f64);
                let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dz[r * classes + t] -= scale;
                }
                vec![(*logits, dz)]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        lq: usize,
        lk: usize,
        c: usize,
        probs: &[T],
        gy: &[T],
    ) -> Contributions<T> {
        let d = c / heads;
        let scale = T::one() / T::of(d as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); lq * c];
        let mut dk = vec![T::zero(); lk * c];
        let mut dv = vec![T::zero(); lk * c];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            let goh = head_columns(gy, lq, c, h, d);
            let qh = head_columns(qd, lq, c, h, d);
            let kh = head_columns(kd, lk, c, h, d);
            let vh = head_columns(vd, lk, c, h, d);

            // dV_h = Pᵀ · dO_h
            let mut dvh = vec![T::zero(); lk * d];
            kernels::matmul_tn_acc(&mut dvh, p, &goh, lq, lk, d);
            // dP = dO_h · V_hᵀ, then through the row softmax
            let mut ds = vec![T::zero(); lq * lk];
            kernels::matmul_nt_acc(&mut ds, &goh, &vh, lq, d, lk);
            for (dsr, pr) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                let dotp = kernels::dot(dsr, pr);
                for (g, &pv) in dsr.iter_mut().zip(pr) {
                    *g = pv * (*g - dotp) * scale;
                }
            }
            let dqh = kernels::matmul(&ds, &kh, lq, lk, d);
            let mut dkh = vec![T::zero(); lk * d];
            kernels::matmul_tn_acc(&mut dkh, &ds, &qh, lq, lk, d);

            for (dst, src, rows) in [(&mut dq, &dqh, lq), (&mut dk, &dkh, lk), (&mut dv, &dvh, lk)] {
                for r in 0..rows {
                    dst[r * c + h * d..r * c + (h + 1) * d].copy_from_slice(&src[r * d..(r + 1) * d]);
                }
            }
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}
