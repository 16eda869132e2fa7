//! Forward kernels and the matching backward kernels used by the tape.
//!
//! Convolutions lower to `im2col` + GEMM per sample. All loops run in a
//! fixed order so results are bitwise reproducible on one machine.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Geometry of one convolution: an `h×w` image with `channels` planes,
/// a `kh×kw` window, and the resulting `oh×ow` grid.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// `1×1`, stride 1, no padding: the column matrix is the image itself.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(img: &[T], g: &Window, col: &mut [T]) {
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
fn col2im<T: Scalar>(col: &[T], g: &Window, img: &mut [T]) {
    let cols = g.cols();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn out_extent(op: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = size + 2 * pad;
    if span < k {
        return Err(Error::invalid(
            op,
            format!("kernel {k} larger than padded extent {span}"),
        ));
    }
    if (span - k) % stride != 0 {
        return Err(Error::invalid(
            op,
            format!("extent {size} with kernel {k}, pad {pad}, stride {stride} does not tile exactly"),
        ));
    }
    Ok((span - k) / stride + 1)
}

pub(crate) fn conv2d_window<T: Scalar>(
    x: Shape,
    w: Shape,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Window> {
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if x.c != w.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x,
            right: w,
        });
    }
    if let Some(b) = bias {
        if b.numel() != w.n {
            return Err(Error::invalid(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.numel(), w.n),
            ));
        }
    }
    let oh = out_extent("conv2d", x.h, w.h, stride, pad)?;
    let ow = out_extent("conv2d", x.w, w.w, stride, pad)?;
    Ok(Window {
        channels: x.c,
        h: x.h,
        w: x.w,
        kh: w.h,
        kw: w.w,
        stride,
        pad,
        oh,
        ow,
    })
}

/// Cross-correlation of `x (N,Cin,H,W)` with `w (Cout,Cin,kH,kW)` plus bias.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_window(x.shape(), w.shape(), bias, stride, pad)?;
    Ok(conv2d_forward(x, w, bias, &g))
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Window,
) -> Tensor<T> {
    let xs = x.shape();
    let oc = w.shape().n;
    let out_shape = Shape::new(xs.n, oc, g.oh, g.ow);
    let mut out = Tensor::zeros(out_shape);
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..xs.n {
        let img = &x.data()[n * xs.sample()..(n + 1) * xs.sample()];
        let dst = &mut out.data_mut()[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        let b_mat: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, g, &mut col);
            &col
        };
        T::gemm(oc, cols, rows, w.data(), false, b_mat, false, dst, false);
        if let Some(b) = bias {
            for (o, plane) in dst.chunks_mut(cols).enumerate() {
                let bo = b.data()[o];
                plane.iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Window,
    dout: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let xs = x.shape();
    let ws = w.shape();
    let oc = ws.n;
    let (rows, cols) = (g.rows(), g.cols());
    let os = dout.shape();
    let mut dx = need.0.then(|| Tensor::zeros(xs));
    let mut dw = need.1.then(|| Tensor::zeros(ws));
    let mut db = need.2.then(|| Tensor::zeros(Shape::new(1, oc, 1, 1)));
    let pointwise = g.is_pointwise();
    let mut col = if pointwise || !need.1 {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let mut dcol = if pointwise || !need.0 {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    for n in 0..xs.n {
        let d = &dout.data()[n * os.sample()..(n + 1) * os.sample()];
        if let Some(db) = db.as_mut() {
            for (o, plane) in d.chunks(cols).enumerate() {
                db.data_mut()[o] += plane.iter().copied().sum();
            }
        }
        let img = &x.data()[n * xs.sample()..(n + 1) * xs.sample()];
        if let Some(dw) = dw.as_mut() {
            let c: &[T] = if pointwise {
                img
            } else {
                im2col(img, g, &mut col);
                &col
            };
            T::gemm(oc, rows, cols, d, false, c, true, dw.data_mut(), true);
        }
        if let Some(dx) = dx.as_mut() {
            let di = &mut dx.data_mut()[n * xs.sample()..(n + 1) * xs.sample()];
            if pointwise {
                T::gemm(rows, cols, oc, w.data(), true, d, false, di, false);
            } else {
                T::gemm(rows, cols, oc, w.data(), true, d, false, &mut dcol, false);
                col2im(&dcol, g, di);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

pub(crate) fn conv_transpose2d_window(x: Shape, w: Shape, stride: usize) -> Result<Window> {
    if stride == 0 {
        return Err(Error::invalid("conv_transpose2d", "stride must be at least 1"));
    }
    if x.c != w.n {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            left: x,
            right: w,
        });
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::invalid("conv_transpose2d", "empty spatial extent"));
    }
    // Described from the output side: the adjoint conv2d sees an
    // `oh'×ow'` image and produces the `h×w` input grid.
    Ok(Window {
        channels: w.c,
        h: (x.h - 1) * stride + w.h,
        w: (x.w - 1) * stride + w.w,
        kh: w.h,
        kw: w.w,
        stride,
        pad: 0,
        oh: x.h,
        ow: x.w,
    })
}

/// Transposed convolution of `x (N,A,H,W)` with `w (A,B,kH,kW)`, no padding.
/// Output is `(N, B, (H-1)·stride + kH, (W-1)·stride + kW)`.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let g = conv_transpose2d_window(x.shape(), w.shape(), stride)?;
    Ok(conv_transpose2d_forward(x, w, &g))
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, g: &Window) -> Tensor<T> {
    let xs = x.shape();
    let a = w.shape().n;
    let out_shape = Shape::new(xs.n, g.channels, g.h, g.w);
    let mut out = Tensor::zeros(out_shape);
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = vec![T::zero(); rows * cols];
    for n in 0..xs.n {
        let src = &x.data()[n * xs.sample()..(n + 1) * xs.sample()];
        T::gemm(rows, cols, a, w.data(), true, src, false, &mut col, false);
        let dst = &mut out.data_mut()[n * out_shape.sample()..(n + 1) * out_shape.sample()];
        col2im(&col, g, dst);
    }
    out
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Window,
    dout: &Tensor<T>,
    need: (bool, bool),
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let a = ws.n;
    let (rows, cols) = (g.rows(), g.cols());
    let os = dout.shape();
    let mut dx = need.0.then(|| Tensor::zeros(xs));
    let mut dw = need.1.then(|| Tensor::zeros(ws));
    let mut col = vec![T::zero(); rows * cols];
    for n in 0..xs.n {
        let d = &dout.data()[n * os.sample()..(n + 1) * os.sample()];
        im2col(d, g, &mut col);
        if let Some(dx) = dx.as_mut() {
            let di = &mut dx.data_mut()[n * xs.sample()..(n + 1) * xs.sample()];
            T::gemm(a, cols, rows, w.data(), false, &col, false, di, false);
        }
        if let Some(dw) = dw.as_mut() {
            let src = &x.data()[n * xs.sample()..(n + 1) * xs.sample()];
            T::gemm(a, rows, cols, src, false, &col, true, dw.data_mut(), true);
        }
    }
    (dx, dw)
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat index of the winning input element (first maximum in
/// row-major order on ties).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2d",
            format!("spatial extents of {s} must be even"),
        ));
    }
    if x.numel() > u32::MAX as usize {
        return Err(Error::invalid("maxpool2d", "tensor too large for u32 indices"));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut idx = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    for plane in 0..s.n * s.c {
        let base = plane * s.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                idx.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, idx))
}

pub(crate) fn maxpool2d_backward<T: Scalar>(input: Shape, idx: &[u32], dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let d = dx.data_mut();
    for (&i, &g) in idx.iter().zip(dout.data()) {
        d[i as usize] += g;
    }
    dx
}

/// Channel concatenation; `a` takes the lower channel indices.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: sa,
            right: sb,
        });
    }
    let out = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let mut data = Vec::with_capacity(out.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.sample()..(n + 1) * sa.sample()]);
        data.extend_from_slice(&b.data()[n * sb.sample()..(n + 1) * sb.sample()]);
    }
    Tensor::from_vec(out, data)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Per-pixel softmax across the channel axis, max-subtracted.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..s.n {
        let base = n * s.sample();
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for c in 0..s.c {
                max = max.max(src[base + c * plane + p]);
            }
            let mut total = T::zero();
            for c in 0..s.c {
                let e = (src[base + c * plane + p] - max).exp();
                dst[base + c * plane + p] = e;
                total += e;
            }
            for c in 0..s.c {
                dst[base + c * plane + p] = dst[base + c * plane + p] / total;
            }
        }
    }
    out
}

/// Inverted dropout mask: each entry is 0 with probability `rate`, else
/// `1/(1-rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(shape: Shape, rate: f64, rng: &mut R) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let data = (0..shape.numel())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("mask length matches shape")
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    Ok(())
}

/// Inverted dropout. Identity when `training` is false or `rate` is 0.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.shape(), rate, rng);
    Ok(mul_same(x, &mask))
}

pub(crate) fn mul_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
    }
    let s = x.shape();
    let out = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    let mut data = Vec::with_capacity(out.numel());
    for plane in x.data().chunks(s.plane().max(1)).take(s.n * s.c) {
        for y in 0..out.h {
            let row = &plane[(y / factor) * s.w..(y / factor + 1) * s.w];
            for xo in 0..out.w {
                data.push(row[xo / factor]);
            }
        }
    }
    Tensor::from_vec(out, data)
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(input: Shape, factor: usize, dout: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input);
    let os = dout.shape();
    let d = dout.data();
    let dst = dx.data_mut();
    for plane in 0..input.n * input.c {
        for y in 0..os.h {
            for xo in 0..os.w {
                dst[plane * input.plane() + (y / factor) * input.w + xo / factor] +=
                    d[plane * os.plane() + y * os.w + xo];
            }
        }
    }
    dx
}

/// `x ⊙ alpha`, where `alpha` has one channel broadcast over `x`'s channels.
pub fn mul_channel_broadcast<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sa) = (x.shape(), alpha.shape());
    if sa.c != 1 || (sx.n, sx.h, sx.w) != (sa.n, sa.h, sa.w) {
        return Err(Error::ShapeMismatch {
            op: "mul_channel_broadcast",
            left: sx,
            right: sa,
        });
    }
    let plane = sx.plane();
    let mut out = x.clone();
    for n in 0..sx.n {
        let a = &alpha.data()[n * plane..(n + 1) * plane];
        for c in 0..sx.c {
            let off = n * sx.sample() + c * plane;
            out.data_mut()[off..off + plane]
                .iter_mut()
                .zip(a)
                .for_each(|(v, &w)| *v *= w);
        }
    }
    Ok(out)
}
