//! Slice-level numeric kernels used by the tape operations.
//!
//! Inner loops are written as `axpy` updates over contiguous rows so the
//! compiler can vectorize them; reductions are kept out of the hot paths.

use crate::tensor::Scalar;

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn add_into<T: Scalar>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// `C[m×n] = A[m×k] · B[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// `C += A · B`.
pub fn matmul_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            axpy(crow, aip, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// `C[m×k] += A[m×n] · B[k×n]ᵀ`.
pub fn matmul_nt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(c, a, &bt, m, n, k);
}

/// `C[k×n] += A[m×k]ᵀ · B[m×n]`.
pub fn matmul_tn_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            axpy(&mut c[p * n..(p + 1) * n], aip, brow);
        }
    }
}

/// Numerically stable softmax of one contiguous row, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Padding applied by [`conv2d_forward`] at the spatial borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PadMode {
    /// Zero padding on both axes.
    Zero,
    /// Columns wrap around (angularly periodic panoramas); rows are zero padded.
    CircularWidth,
}

/// Geometry of a square-kernel "same" convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: PadMode,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.w.div_ceil(self.stride)
    }

    /// Source column for output column `ox` and kernel column `kx`.
    #[inline]
    fn src_col(&self, ox: usize, kx: usize) -> Option<usize> {
        let half = (self.k / 2) as isize;
        let ix = (ox * self.stride) as isize + kx as isize - half;
        match self.pad {
            PadMode::Zero => (0..self.w as isize).contains(&ix).then_some(ix as usize),
            PadMode::CircularWidth => Some(ix.rem_euclid(self.w as isize) as usize),
        }
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let half = (self.k / 2) as isize;
        let iy = (oy * self.stride) as isize + ky as isize - half;
        (0..self.h as isize).contains(&iy).then_some(iy as usize)
    }
}

/// Cross-correlation of an `(H, W, Cin)` map with a `(k, k, Cin, Cout)` kernel.
pub fn conv2d_forward<T: Scalar>(x: &[T], kernel: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); oh * ow * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.cout;
            let opix = &mut out[o..o + g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src_row(oy, ky) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src_col(ox, kx) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == T::zero() {
                            continue;
                        }
                        axpy(opix, xv, &kernel[kbase + ci * g.cout..][..g.cout]);
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to its input and kernel.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    dout: &[T],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); kernel.len()]);
    // (k, k, Cout, Cin) so the input-gradient update is an axpy over Cin
    let kt: Option<Vec<T>> = want_dx.then(|| {
        let mut t = vec![T::zero(); kernel.len()];
        for tap in 0..g.k * g.k {
            let base = tap * g.cin * g.cout;
            for ci in 0..g.cin {
                for co in 0..g.cout {
                    t[base + co * g.cin + ci] = kernel[base + ci * g.cout + co];
                }
            }
        }
        t
    });
    for oy in 0..oh {
        for ox in 0..ow {
            let o = (oy * ow + ox) * g.cout;
            let dpix = &dout[o..o + g.cout];
            for ky in 0..g.k {
                let Some(iy) = g.src_row(oy, ky) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src_col(ox, kx) else { continue };
                    let xo = (iy * g.w + ix) * g.cin;
                    let kbase = (ky * g.k + kx) * g.cin * g.cout;
                    if let (Some(dx), Some(kt)) = (dx.as_mut(), kt.as_ref()) {
                        let dxin = &mut dx[xo..xo + g.cin];
                        for (co, &d) in dpix.iter().enumerate() {
                            if d == T::zero() {
                                continue;
                            }
                            axpy(dxin, d, &kt[kbase + co * g.cin..][..g.cin]);
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for ci in 0..g.cin {
                            let xv = x[xo + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            axpy(&mut dk[kbase + ci * g.cout..][..g.cout], xv, dpix);
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Source taps for half-pixel bilinear resampling along one axis.
///
/// Returns, for each output coordinate, the two source indices and the
/// weight of the second one. Sources are clamped at the borders.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}
