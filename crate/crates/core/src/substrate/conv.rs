//! Convolution kernels (im2col + GEMM) and their adjoints.

use super::scalar::{gemm, MatLayout};
use super::{Scalar, Tensor};
use crate::error::{ensure_shape, Result};

/// Output extent of a strided, padded cross-correlation.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input - 1) * stride + kernel - 2 * pad
}

/// Geometry of an im2col lowering: an image side `[n, c, h, w]` and a patch
/// grid `ho x wo` produced by sliding a `kh x kw` window.
#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Lowers `x` into a `[c*kh*kw, n*ho*wo]` matrix of patches.
fn im2col<F: Scalar>(x: &[F], g: &Geom) -> Vec<F> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut out = vec![F::zero(); g.col_rows() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds patch columns back onto the image.
fn col2im<F: Scalar>(col: &[F], g: &Geom) -> Vec<F> {
    let cols = g.col_cols();
    let plane = g.ho * g.wo;
    let mut out = vec![F::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut out[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * plane..(n + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[n, c, p]` -> `[c, n*p]`.
fn to_channel_major<F: Scalar>(x: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]
                .copy_from_slice(&x[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// `[c, n*p]` -> `[n, c, p]`.
fn from_channel_major<F: Scalar>(x: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&x[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    out
}

fn add_channel_bias<F: Scalar>(out: &mut [F], bias: &[F], n: usize, p: usize) {
    let c = bias.len();
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate() {
            for v in &mut out[(ni * c + ci) * p..(ni * c + ci + 1) * p] {
                *v += b;
            }
        }
    }
}

fn channel_sums<F: Scalar>(x: &[F], n: usize, c: usize, p: usize) -> Vec<F> {
    let mut s = vec![F::zero(); c];
    for ni in 0..n {
        for (ci, sc) in s.iter_mut().enumerate() {
            *sc += x[(ni * c + ci) * p..(ni * c + ci + 1) * p].iter().copied().sum::<F>();
        }
    }
    s
}

fn conv_geom<F: Scalar>(x: &Tensor<F>, k: &Tensor<F>, stride: usize, pad: usize) -> Result<(Geom, usize)> {
    let (n, c, h, w) = x.dims4()?;
    ensure_shape!(k.ndim() == 4, "conv kernel must be 4-D, got {:?}", k.shape());
    let (co, kc, kh, kw) = k.dims4()?;
    ensure_shape!(kc == c, "conv input has {c} channels but kernel expects {kc}");
    ensure_shape!(stride >= 1, "conv stride must be positive");
    ensure_shape!(
        kh <= h + 2 * pad && kw <= w + 2 * pad,
        "kernel {kh}x{kw} larger than padded input {}x{}",
        h + 2 * pad,
        w + 2 * pad
    );
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    Ok((
        Geom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        },
        co,
    ))
}

/// Cross-correlation of `x: [N,C,H,W]` with `k: [Co,C,kh,kw]`.
pub fn conv2d<F: Scalar>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (g, co) = conv_geom(x, k, stride, pad)?;
    if let Some(b) = bias {
        ensure_shape!(b.len() == co, "conv bias has {} entries for {co} channels", b.len());
    }
    let col = im2col(x.data(), &g);
    let p = g.ho * g.wo;
    let mut tmp = vec![F::zero(); co * g.col_cols()];
    gemm(
        F::one(),
        k.data(),
        MatLayout::row_major(co, g.col_rows()),
        &col,
        MatLayout::row_major(g.col_rows(), g.col_cols()),
        F::zero(),
        &mut tmp,
        MatLayout::row_major(co, g.col_cols()),
    );
    let mut out = from_channel_major(&tmp, g.n, co, p);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.n, p);
    }
    Tensor::new(vec![g.n, co, g.ho, g.wo], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    dout: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (g, co) = conv_geom(x, k, stride, pad)?;
    let p = g.ho * g.wo;
    ensure_shape!(
        dout.shape() == [g.n, co, g.ho, g.wo],
        "conv upstream gradient {:?} does not match output",
        dout.shape()
    );
    let col = im2col(x.data(), &g);
    let dtmp = to_channel_major(dout.data(), g.n, co, p);
    let lcol = MatLayout::row_major(g.col_rows(), g.col_cols());
    let ld = MatLayout::row_major(co, g.col_cols());
    let lk = MatLayout::row_major(co, g.col_rows());

    let mut dk = vec![F::zero(); k.len()];
    gemm(F::one(), &dtmp, ld, &col, lcol.t(), F::zero(), &mut dk, lk);

    let mut dcol = vec![F::zero(); col.len()];
    gemm(F::one(), k.data(), lk.t(), &dtmp, ld, F::zero(), &mut dcol, lcol);
    let dx = col2im(&dcol, &g);
    let db = channel_sums(dout.data(), g.n, co, p);
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(vec![co], db)?,
    ))
}

fn transpose_geom<F: Scalar>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Geom, usize)> {
    let (n, c, h, w) = x.dims4()?;
    ensure_shape!(k.ndim() == 4, "transposed-conv kernel must be 4-D, got {:?}", k.shape());
    let (kc, co, kh, kw) = k.dims4()?;
    ensure_shape!(kc == c, "transposed conv input has {c} channels but kernel expects {kc}");
    ensure_shape!(stride >= 1, "transposed conv stride must be positive");
    ensure_shape!(
        (h - 1) * stride + kh > 2 * pad && (w - 1) * stride + kw > 2 * pad,
        "transposed conv padding {pad} consumes the whole output"
    );
    let ho = conv_transpose_out_len(h, kh, stride, pad);
    let wo = conv_transpose_out_len(w, kw, stride, pad);
    // The image side of the lowering is the (larger) output; the patch grid is the input.
    Ok((
        Geom {
            n,
            c: co,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad,
            ho: h,
            wo: w,
        },
        c,
    ))
}

/// Transposed convolution of `x: [N,C,H,W]` with `k: [C,Co,kh,kw]`; the
/// adjoint of [`conv2d`] with the same kernel geometry.
pub fn conv_transpose2d<F: Scalar>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (g, c) = transpose_geom(x, k, stride, pad)?;
    if let Some(b) = bias {
        ensure_shape!(b.len() == g.c, "transposed conv bias has {} entries for {} channels", b.len(), g.c);
    }
    let p_in = g.ho * g.wo;
    let xp = to_channel_major(x.data(), g.n, c, p_in);
    let lw = MatLayout::row_major(c, g.col_rows());
    let mut col = vec![F::zero(); g.col_rows() * g.col_cols()];
    gemm(
        F::one(),
        k.data(),
        lw.t(),
        &xp,
        MatLayout::row_major(c, g.col_cols()),
        F::zero(),
        &mut col,
        MatLayout::row_major(g.col_rows(), g.col_cols()),
    );
    let mut out = col2im(&col, &g);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b.data(), g.n, g.h * g.w);
    }
    Tensor::new(vec![g.n, g.c, g.h, g.w], out)
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, kernel and bias.
pub fn conv_transpose2d_backward<F: Scalar>(
    x: &Tensor<F>,
    k: &Tensor<F>,
    dout: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (g, c) = transpose_geom(x, k, stride, pad)?;
    ensure_shape!(
        dout.shape() == [g.n, g.c, g.h, g.w],
        "transposed conv upstream gradient {:?} does not match output",
        dout.shape()
    );
    let p_in = g.ho * g.wo;
    let xp = to_channel_major(x.data(), g.n, c, p_in);
    let dcol = im2col(dout.data(), &g);
    let lw = MatLayout::row_major(c, g.col_rows());
    let lx = MatLayout::row_major(c, g.col_cols());
    let lcol = MatLayout::row_major(g.col_rows(), g.col_cols());

    let mut dxp = vec![F::zero(); xp.len()];
    gemm(F::one(), k.data(), lw, &dcol, lcol, F::zero(), &mut dxp, lx);
    let mut dk = vec![F::zero(); k.len()];
    gemm(F::one(), &xp, lx, &dcol, lcol.t(), F::zero(), &mut dk, lw);
    let db = channel_sums(dout.data(), g.n, g.c, g.h * g.w);
    Ok((
        Tensor::new(x.shape().to_vec(), from_channel_major(&dxp, g.n, c, p_in))?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(vec![g.c], db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4().unwrap();
        let (co, _, kh, kw) = k.dims4().unwrap();
        let ho = conv_out_len(h, kh, stride, pad);
        let wo = conv_out_len(w, kw, stride, pad);
        let mut out = Tensor::zeros(vec![n, co, ho, wo]);
        for ni in 0..n {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((ni * co + o) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
        })
    }

    #[test]
    fn scaling_kernel() {
        let x = Tensor::<f32>::ones(vec![1, 1, 3, 3]);
        let k = Tensor::full(vec![1, 1, 1, 1], 2.0);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn direct_summation() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(vec![1, 1, 2, 2]);
        let y = conv2d(&x, &k, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 4, 4]);
        let k = Tensor::zeros(vec![1, 3, 3, 3]);
        assert!(conv2d(&x, &k, None, 1, 1).is_err());
        let kt = Tensor::zeros(vec![3, 1, 2, 2]);
        assert!(conv_transpose2d(&x, &kt, None, 2, 0).is_err());
    }

    #[test]
    fn matches_naive_loops() {
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 2), (1, 2), (2, 0)] {
            let x = pseudo(vec![2, 3, 7, 6], 3);
            let k = pseudo(vec![4, 3, 3, 3], 5);
            let fast = conv2d(&x, &k, None, stride, pad).unwrap();
            let slow = naive_conv(&x, &k, stride, pad);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
    }

    #[test]
    fn single_tap_spread() {
        let x = Tensor::<f32>::full(vec![1, 1, 1, 1], 3.5);
        let k = Tensor::ones(vec![1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &k, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn transpose_shape_formula() {
        let x = Tensor::<f32>::zeros(vec![1, 2, 36, 18]);
        let k = Tensor::zeros(vec![2, 2, 4, 4]);
        let y = conv_transpose2d(&x, &k, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 72, 36]);
    }

    /// <conv(x), y> == <x, conv_transpose(y)> for the same kernel.
    #[test]
    fn transpose_is_adjoint() {
        for &(stride, pad) in &[(1, 0), (2, 1), (2, 0), (1, 1)] {
            let x = pseudo(vec![2, 3, 8, 6], 11);
            let k = pseudo(vec![4, 3, 4, 4], 12);
            let y = conv2d(&x, &k, None, stride, pad).unwrap();
            let r = pseudo(y.shape().to_vec(), 13);
            // k as a transposed-conv kernel maps 4 -> 3 channels: [4, 3, kh, kw] is already [C_in, C_out, ..].
            let back = conv_transpose2d(&r, &k, None, stride, pad).unwrap();
            if back.shape() != x.shape() {
                continue;
            }
            let lhs: f64 = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn shape_formulas_hold_over_stride_and_padding() {
        for stride in 1..=2 {
            for pad in 0..=2 {
                for &(h, w) in &[(9usize, 7usize), (12, 6), (5, 5)] {
                    let x = Tensor::<f32>::zeros(vec![1, 2, h, w]);
                    let k = Tensor::zeros(vec![3, 2, 3, 3]);
                    let y = conv2d(&x, &k, None, stride, pad).unwrap();
                    assert_eq!(y.shape()[2], (h + 2 * pad - 3) / stride + 1);
                    assert_eq!(y.shape()[3], (w + 2 * pad - 3) / stride + 1);
                    let kt = Tensor::zeros(vec![2, 3, 3, 3]);
                    let t = conv_transpose2d(&x, &kt, None, stride, pad).unwrap();
                    assert_eq!(t.shape()[2], (h - 1) * stride + 3 - 2 * pad);
                    assert_eq!(t.shape()[3], (w - 1) * stride + 3 - 2 * pad);
                }
            }
        }
    }
}
