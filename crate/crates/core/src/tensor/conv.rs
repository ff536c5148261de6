//! 2-D convolution kernels on NCHW data with square kernels.
//!
//! The im2col + GEMM path is what the tape uses; the direct loops exist as an
//! independent reference and are selectable through [`ConvAlgo`].

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ConvAlgo {
    Direct,
    #[default]
    Im2col,
}

/// `floor((h + 2p - k) / s) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || h + 2 * pad < k {
        return None;
    }
    Some((h + 2 * pad - k) / stride + 1)
}

/// `(h - 1) * s - 2p + k`, or `None` when the result is not positive.
pub fn conv_transpose_out_size(h: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || h == 0 {
        return None;
    }
    let full = (h - 1) * stride + k;
    (full > 2 * pad).then(|| full - 2 * pad)
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_geom<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d", format!("weight must be 4-D, got {:?}", weight.shape()))),
    };
    if k != k2 {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, weight {:?} expects {wcin}", weight.shape()),
        ));
    }
    check_bias("conv2d", bias, cout)?;
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be >= 1"));
    }
    let (ho, wo) = match (conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k} with pad {pad} does not fit input {h}x{w}"),
            ))
        }
    };
    Ok(ConvGeom { n, cin, cout, h, w, k, stride, pad, ho, wo })
}

/// Geometry of a transposed convolution. Weight layout is `[Cin, Cout, K, K]`;
/// `h`/`w` are the input extents and `ho`/`wo` the (larger) output extents.
pub(crate) fn conv_transpose_geom<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, k2) = match weight.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("weight must be 4-D, got {:?}", weight.shape()),
            ))
        }
    };
    if k != k2 {
        return Err(Error::shape("conv_transpose2d", format!("kernel must be square, got {k}x{k2}")));
    }
    if wcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {cin} channels, weight {:?} expects {wcin}", weight.shape()),
        ));
    }
    check_bias("conv_transpose2d", bias, cout)?;
    if stride == 0 {
        return Err(Error::invalid("conv_transpose2d stride must be >= 1"));
    }
    let (ho, wo) = match (
        conv_transpose_out_size(h, k, stride, pad),
        conv_transpose_out_size(w, k, stride, pad),
    ) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("padding {pad} consumes the whole {h}x{w} output"),
            ))
        }
    };
    Ok(ConvGeom { n, cin, cout, h, w, k, stride, pad, ho, wo })
}

fn check_bias<S: Real>(op: &'static str, bias: Option<&Tensor<S>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(op, format!("bias {:?} for {cout} output channels", b.shape())));
        }
    }
    Ok(())
}

/// Unfold one image `[c, h, w]` into `[c*k*k, ho*wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Real>(
    img: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [S],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..][..w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Real>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [S],
) {
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[(ci * h + iy as usize) * w..][..w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<S: Real>(out: &mut [S], bias: Option<&Tensor<S>>, cout: usize, plane: usize) {
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate().take(cout) {
            out[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v = *v + bv);
        }
    }
}

pub fn conv2d_im2col<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = conv_geom(x, weight, bias, stride, pad)?;
    let rows = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let mut out = vec![S::zero(); g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, ob)| {
        let mut cols = vec![S::zero(); rows * plane];
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        im2col(xb, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, &mut cols);
        S::gemm(
            g.cout, rows, plane, S::one(), weight.data(), rows as isize, 1, &cols, plane as isize, 1,
            S::zero(), ob, plane as isize, 1,
        );
        add_bias(ob, bias, g.cout, plane);
    });
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub fn conv2d_direct<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = conv_geom(x, weight, bias, stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![S::zero(); g.n * g.cout * g.ho * g.wo];
    for b in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = bias.map_or(S::zero(), |t| t.data()[co]);
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = xd[((b * g.cin + ci) * g.h + iy as usize) * g.w + ix as usize];
                                let wv = wd[((co * g.cin + ci) * g.k + ky) * g.k + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((b * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

/// Gradients of a convolution: `(d input, d weight, d bias)`.
pub(crate) fn conv2d_backward<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    gout: &[S],
    stride: usize,
    pad: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let g = conv_geom(x, weight, None, stride, pad).expect("validated in forward");
    let rows = g.cin * g.k * g.k;
    let plane = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * plane;
    let wsz = weight.len();

    // Per-image partials are reduced in index order so results do not
    // depend on thread scheduling.
    let partials: Vec<(Vec<S>, Vec<S>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let mut cols = vec![S::zero(); rows * plane];
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            let gb = &gout[b * out_sz..(b + 1) * out_sz];
            im2col(xb, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, &mut cols);
            let mut gw = vec![S::zero(); wsz];
            // gw[cout, rows] = gout_b[cout, plane] * cols^T[plane, rows]
            S::gemm(
                g.cout, plane, rows, S::one(), gb, plane as isize, 1, &cols, 1, plane as isize,
                S::zero(), &mut gw, rows as isize, 1,
            );
            // gcols[rows, plane] = W^T[rows, cout] * gout_b[cout, plane]
            S::gemm(
                rows, g.cout, plane, S::one(), weight.data(), 1, rows as isize, gb, plane as isize, 1,
                S::zero(), &mut cols, plane as isize, 1,
            );
            let mut gx = vec![S::zero(); in_sz];
            col2im(&cols, g.cin, g.h, g.w, g.k, g.stride, g.pad, g.ho, g.wo, &mut gx);
            (gx, gw)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.n * in_sz);
    let mut gw = vec![S::zero(); wsz];
    for (px, pw) in partials {
        gx.extend_from_slice(&px);
        gw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
    }
    let gbias = bias_grad(gout, g.n, g.cout, plane);
    (gx, gw, gbias)
}

fn bias_grad<S: Real>(gout: &[S], n: usize, cout: usize, plane: usize) -> Vec<S> {
    let mut gb = vec![S::zero(); cout];
    for b in 0..n {
        for (co, acc) in gb.iter_mut().enumerate() {
            let start = (b * cout + co) * plane;
            *acc = *acc + gout[start..start + plane].iter().copied().sum::<S>();
        }
    }
    gb
}

pub fn conv_transpose2d_im2col<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = conv_transpose_geom(x, weight, bias, stride, pad)?;
    let rows = g.cout * g.k * g.k;
    let in_plane = g.h * g.w;
    let in_sz = g.cin * in_plane;
    let out_plane = g.ho * g.wo;
    let out_sz = g.cout * out_plane;
    let mut out = vec![S::zero(); g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(b, ob)| {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let mut cols = vec![S::zero(); rows * in_plane];
        // cols[rows, in_plane] = W^T[rows, cin] * x_b[cin, in_plane]
        S::gemm(
            rows, g.cin, in_plane, S::one(), weight.data(), 1, rows as isize, xb, in_plane as isize, 1,
            S::zero(), &mut cols, in_plane as isize, 1,
        );
        col2im(&cols, g.cout, g.ho, g.wo, g.k, g.stride, g.pad, g.h, g.w, ob);
        add_bias(ob, bias, g.cout, out_plane);
    });
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub fn conv_transpose2d_direct<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = conv_transpose_geom(x, weight, bias, stride, pad)?;
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![S::zero(); g.n * g.cout * g.ho * g.wo];
    for b in 0..g.n {
        for co in 0..g.cout {
            let bv = bias.map_or(S::zero(), |t| t.data()[co]);
            out[(b * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo]
                .iter_mut()
                .for_each(|v| *v = bv);
        }
        for ci in 0..g.cin {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xv = xd[((b * g.cin + ci) * g.h + iy) * g.w + ix];
                    for co in 0..g.cout {
                        for ky in 0..g.k {
                            let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                            if oy < 0 || oy >= g.ho as isize {
                                continue;
                            }
                            for kx in 0..g.k {
                                let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                                if ox < 0 || ox >= g.wo as isize {
                                    continue;
                                }
                                let wv = wd[((ci * g.cout + co) * g.k + ky) * g.k + kx];
                                let o = ((b * g.cout + co) * g.ho + oy as usize) * g.wo + ox as usize;
                                out[o] = out[o] + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) fn conv_transpose2d_backward<S: Real>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    gout: &[S],
    stride: usize,
    pad: usize,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let g = conv_transpose_geom(x, weight, None, stride, pad).expect("validated in forward");
    let rows = g.cout * g.k * g.k;
    let in_plane = g.h * g.w;
    let in_sz = g.cin * in_plane;
    let out_plane = g.ho * g.wo;
    let out_sz = g.cout * out_plane;
    let wsz = weight.len();

    let partials: Vec<(Vec<S>, Vec<S>)> = (0..g.n)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
            let gb = &gout[b * out_sz..(b + 1) * out_sz];
            let mut cols = vec![S::zero(); rows * in_plane];
            im2col(gb, g.cout, g.ho, g.wo, g.k, g.stride, g.pad, g.h, g.w, &mut cols);
            // gx_b[cin, in_plane] = W[cin, rows] * cols[rows, in_plane]
            let mut gx = vec![S::zero(); in_sz];
            S::gemm(
                g.cin, rows, in_plane, S::one(), weight.data(), rows as isize, 1, &cols, in_plane as isize, 1,
                S::zero(), &mut gx, in_plane as isize, 1,
            );
            // gw[cin, rows] = x_b[cin, in_plane] * cols^T[in_plane, rows]
            let mut gw = vec![S::zero(); wsz];
            S::gemm(
                g.cin, in_plane, rows, S::one(), xb, in_plane as isize, 1, &cols, 1, in_plane as isize,
                S::zero(), &mut gw, rows as isize, 1,
            );
            (gx, gw)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.n * in_sz);
    let mut gw = vec![S::zero(); wsz];
    for (px, pw) in partials {
        gx.extend_from_slice(&px);
        gw.iter_mut().zip(&pw).for_each(|(a, &b)| *a = *a + b);
    }
    let gbias = bias_grad(gout, g.n, g.cout, out_plane);
    (gx, gw, gbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Independent quadruple-loop oracle written against the textbook
    /// definition, in f64, with explicit zero padding.
    fn naive_conv(
        x: &[f64],
        (n, cin, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (cout, k): (usize, usize),
        bias: &[f64],
        s: usize,
        p: usize,
    ) -> Vec<f64> {
        let hp = h + 2 * p;
        let wp = w + 2 * p;
        let mut padded = vec![0.0; n * cin * hp * wp];
        for b in 0..n {
            for c in 0..cin {
                for y in 0..h {
                    for xx in 0..w {
                        padded[((b * cin + c) * hp + y + p) * wp + xx + p] = x[((b * cin + c) * h + y) * w + xx];
                    }
                }
            }
        }
        let ho = (hp - k) / s + 1;
        let wo = (wp - k) / s + 1;
        let mut out = Vec::new();
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for c in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += padded[((b * cin + c) * hp + oy * s + ky) * wp + ox * s + kx]
                                        * wt[((co * cin + c) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        for algo in [conv2d_direct::<f64>, conv2d_im2col::<f64>] {
            let y = algo(&x, &w, None, 1, 0).unwrap();
            assert_eq!(y.shape(), &[1, 1, 1, 1]);
            assert_eq!(y.item(), 9.0);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[2, 3, 5, 4], 1.0, &mut rng);
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv2d_im2col(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn strided_padded_matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let x = Tensor::<f64>::randn(&[2, 4, 8, 8], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[6, 4, 3, 3], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let want = naive_conv(x.data(), (2, 4, 8, 8), w.data(), (6, 3), b.data(), 2, 1);
        for algo in [conv2d_direct::<f64>, conv2d_im2col::<f64>] {
            let y = algo(&x, &w, Some(&b), 2, 1).unwrap();
            assert_eq!(y.shape(), &[2, 6, 4, 4]);
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "{a} vs {e}");
            }
        }
    }

    #[test]
    fn direct_and_im2col_agree_f32() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f32>::randn(&[3, 5, 9, 7], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[4, 5, 3, 3], 0.3, &mut rng);
        let b = Tensor::<f32>::randn(&[4], 1.0, &mut rng);
        for (s, p) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let a = conv2d_direct(&x, &w, Some(&b), s, p).unwrap();
            let c = conv2d_im2col(&x, &w, Some(&b), s, p).unwrap();
            assert!(a.max_abs_diff(&c) < 1e-5, "s={s} p={p}");
        }
        let wt = Tensor::<f32>::randn(&[5, 4, 4, 4], 0.3, &mut rng);
        for (s, p) in [(1, 0), (2, 1), (2, 0), (3, 1)] {
            let a = conv_transpose2d_direct(&x, &wt, Some(&b), s, p).unwrap();
            let c = conv_transpose2d_im2col(&x, &wt, Some(&b), s, p).unwrap();
            assert!(a.max_abs_diff(&c) < 1e-5, "s={s} p={p}");
        }
    }

    #[test]
    fn transpose_overlap_add_pattern() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        // Stride equals kernel size: each input pixel paints its own 2x2 block.
        let y = conv_transpose2d_im2col(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);

        // 3x3 kernel at stride 2 overlaps on the shared row/column.
        let w3 = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let y = conv_transpose2d_im2col(&x, &w3, None, 2, 0).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 3.0, 2.0, 2.0,
            1.0, 1.0, 3.0, 2.0, 2.0,
            4.0, 4.0, 10.0, 6.0, 6.0,
            3.0, 3.0, 7.0, 4.0, 4.0,
            3.0, 3.0, 7.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn transpose_of_zero_is_bias() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        let w = Tensor::<f64>::full(&[2, 3, 4, 4], 0.7);
        let b = Tensor::<f64>::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv_transpose2d_im2col(&x, &w, Some(&b), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 6]);
        for c in 0..3 {
            assert!(y.data()[c * 36..(c + 1) * 36].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn transpose_shape_law() {
        let mut rng = Rng::new(2);
        for h in 1..6 {
            for s in 1..4 {
                for k in 1..5 {
                    for p in 0..3 {
                        let expect = ((h - 1) * s + k as usize).checked_sub(2 * p).filter(|&v| v > 0);
                        let x = Tensor::<f64>::randn(&[1, 1, h, h], 1.0, &mut rng);
                        let w = Tensor::<f64>::randn(&[1, 1, k, k], 1.0, &mut rng);
                        match (expect, conv_transpose2d_im2col(&x, &w, None, s, p)) {
                            (Some(e), Ok(y)) => assert_eq!(y.shape(), &[1, 1, e, e]),
                            (None, Err(_)) => {}
                            (e, r) => panic!("h={h} s={s} k={k} p={p}: {e:?} vs {r:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn stride_two_round_trip_restores_extent() {
        let x = Tensor::<f32>::zeros(&[1, 2, 16, 12]);
        let w = Tensor::<f32>::zeros(&[3, 2, 3, 3]);
        let y = conv2d_im2col(&x, &w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 6]);
        let wt = Tensor::<f32>::zeros(&[3, 2, 4, 4]);
        let z = conv_transpose2d_im2col(&y, &wt, None, 2, 1).unwrap();
        assert_eq!(z.shape(), &[1, 2, 16, 12]);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 4, 3, 3]);
        let err = conv2d_im2col(&x, &w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("3 channels"), "{err}");
        let too_big = Tensor::<f32>::zeros(&[2, 3, 7, 7]);
        assert!(conv2d_direct(&x, &too_big, None, 1, 0).is_err());
    }
}
