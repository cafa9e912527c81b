//! Raw numeric kernels shared by the forward and backward passes.

use crate::tensor::{numel, Tensor};

/// `c = a·b + beta·c` with explicit row/column strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Result shape of numpy-style broadcasting, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out_shape`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every output position, handing the closure the flat offsets into
/// `a` and `b` along with the output's innermost run.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(&out_shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        f(o * inner, oa, ob, inner, ia, ib);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
    });
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![0.0; numel(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, oa, ob, len, ia, ib| {
        let dst = &mut out[o..o + len];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = f(ad[oa + j * ia], bd[ob + j * ib]);
        }
    });
    Tensor::new(out_shape, out)
}

/// Sums `t` down to `shape`, the inverse of broadcasting `shape` up to `t`.
pub fn sum_to_shape(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape() == shape {
        return t.clone();
    }
    let out_shape = t.shape().to_vec();
    let st = broadcast_strides(&out_shape, &out_shape);
    let ss = broadcast_strides(shape, &out_shape);
    let mut acc = vec![0.0; numel(shape)];
    let td = t.data();
    for_each_broadcast(&out_shape, &st, &ss, |_, ot, os, len, it, is| {
        if is == 0 {
            let s: f64 = (0..len).map(|j| td[ot + j * it]).sum();
            acc[os] += s;
        } else {
            for j in 0..len {
                acc[os + j * is] += td[ot + j * it];
            }
        }
    });
    Tensor::new(shape.to_vec(), acc)
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Whether the convolution is a plain per-pixel channel mix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `C×H×W` sample into a `(C·kh·kw)×(Ho·Wo)` column matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back onto a `C×H×W` sample, accumulating overlaps.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.height as isize, g.width as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[oy * ow..(oy + 1) * ow];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Dense 2-D convolution (cross-correlation) of an `N×C×H×W` batch.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let (co, ci, kh, kw) = weight.dims4();
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    let g = ConvGeom {
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad,
    };
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d: kernel larger than input");
    let (oh, ow) = (g.out_h(), g.out_w());
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0; n * co * oh * ow];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; rows * ncols] };
    let wd = weight.data();
    for s in 0..n {
        let xs = &x.data()[s * c * h * w..(s + 1) * c * h * w];
        let os = &mut out[s * co * oh * ow..(s + 1) * co * oh * ow];
        if let Some(b) = bias {
            for (o, plane) in os.chunks_mut(oh * ow).enumerate() {
                plane.fill(b.data()[o]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut cols);
            &cols
        };
        gemm(co, rows, ncols, wd, rows, 1, src, ncols, 1, beta, os);
    }
    Tensor::new([n, co, oh, ow], out)
}

/// Splits a shape around `axis` into `(outer, dim, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    crate::tensor::split_axis(shape, axis)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..dim {
                max = max.max(d[base + k * inner]);
            }
            let mut sum = 0.0;
            for k in 0..dim {
                let e = (d[base + k * inner] - max).exp();
                d[base + k * inner] = e;
                sum += e;
            }
            for k in 0..dim {
                d[base + k * inner] /= sum;
            }
        }
    }
    out
}

/// Numerically stable log-softmax along `axis`.
pub fn log_softmax(x: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * dim * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..dim {
                max = max.max(d[base + k * inner]);
            }
            let sum: f64 = (0..dim).map(|k| (d[base + k * inner] - max).exp()).sum();
            let lse = max + sum.ln();
            for k in 0..dim {
                d[base + k * inner] -= lse;
            }
        }
    }
    out
}

/// Sum along `axis`, keeping it with length 1.
pub fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, dim, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let d = x.data();
    for o in 0..outer {
        for k in 0..dim {
            let src = &d[(o * dim + k) * inner..(o * dim + k + 1) * inner];
            for (a, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *a += v;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

/// Batched matrix product of `[B,M,K]` and `[B,K,N]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rank(), 3, "bmm expects rank-3 operands");
    assert_eq!(b.rank(), 3, "bmm expects rank-3 operands");
    let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    assert_eq!(b.shape()[0], bs, "bmm batch mismatch");
    assert_eq!(b.shape()[1], k, "bmm inner dimension mismatch");
    let n = b.shape()[2];
    let mut out = vec![0.0; bs * m * n];
    for s in 0..bs {
        gemm(
            m,
            k,
            n,
            &a.data()[s * m * k..(s + 1) * m * k],
            k,
            1,
            &b.data()[s * k * n..(s + 1) * k * n],
            n,
            1,
            0.0,
            &mut out[s * m * n..(s + 1) * m * n],
        );
    }
    Tensor::new([bs, m, n], out)
}

/// Swaps the last two axes.
pub fn transpose_last2(x: &Tensor) -> Tensor {
    let r = x.rank();
    assert!(r >= 2, "transpose needs rank ≥ 2");
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = numel(&x.shape()[..r - 2]);
    let mut out = vec![0.0; x.numel()];
    let d = x.data();
    for s in 0..batch {
        let src = &d[s * m * n..(s + 1) * m * n];
        let dst = &mut out[s * m * n..(s + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([n, co, oh, ow]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((s * c + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((o * c + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x = Tensor::from_fn([2, 3, 7, 6], |i| ((i * 37 % 11) as f64 - 5.0) / 7.0);
        let w = Tensor::from_fn([4, 3, 3, 3], |i| ((i * 13 % 7) as f64 - 3.0) / 5.0);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let fast = conv2d(&x, &w, None, stride, pad);
            let slow = naive_conv(&x, &w, stride, pad);
            let err = fast.zip_map(&slow, |a, b| (a - b).abs()).max_abs();
            assert!(err < 1e-12, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn broadcast_and_reduce_are_adjoint() {
        let a = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let b = Tensor::from_fn([3, 1], |i| i as f64 + 1.0);
        let prod = broadcast_zip(&a, &b, |x, y| x * y);
        assert_eq!(prod.shape(), &[2, 3, 4]);
        assert_eq!(prod.data()[5], 5.0 * 2.0);
        let r = sum_to_shape(&Tensor::ones([2, 3, 4]), &[3, 1]);
        assert_eq!(r.data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = Tensor::from_fn([3, 5], |i| (i as f64).sin() * 4.0);
        let s = softmax(&x, 0);
        let cols = sum_axis(&s, 0);
        for v in cols.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
