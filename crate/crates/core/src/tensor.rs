//! Dense rank-4 tensors (batch, channel, height, width) in row-major f64.
//!
//! This module holds the plain value type plus the non-recorded forward
//! kernels (convolution, pooling, resampling, activations). The tape in
//! [`crate::tape`] wraps these kernels with gradient records; the data and
//! metrics paths call them directly.

use crate::{Error, Result};
use std::fmt;

/// Shape of a rank-4 tensor: (batch, channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Flat row-major index of (n, c, y, x).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense rank-4 tensor, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch {
                context: "Tensor4::from_vec".into(),
                expected: format!("{} elements for shape {shape}", shape.numel()),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == Shape4::new(1, 1, 1, 1)
    }

    /// Sole entry of a 1x1x1x1 tensor.
    pub fn scalar(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::NonScalarLoss(self.shape.to_string()));
        }
        Ok(self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        same_shape("zip_map", self, other)?;
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Mirror along the width axis.
    pub fn flip_w(&self) -> Tensor4 {
        let s = self.shape;
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        out.set(n, c, y, x, self.at(n, c, y, s.w - 1 - x));
                    }
                }
            }
        }
        out
    }

    /// Mirror along the height axis.
    pub fn flip_h(&self) -> Tensor4 {
        let s = self.shape;
        let mut out = Tensor4::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    for x in 0..s.w {
                        out.set(n, c, y, x, self.at(n, c, s.h - 1 - y, x));
                    }
                }
            }
        }
        out
    }

    /// Crop to `new_h` x `new_w`, keeping the center (ties round toward the
    /// top-left).
    pub fn center_crop(&self, new_h: usize, new_w: usize) -> Result<Tensor4> {
        let s = self.shape;
        if new_h == 0 || new_w == 0 || new_h > s.h || new_w > s.w {
            return Err(Error::InvalidArgument(format!(
                "cannot crop {}x{} to {new_h}x{new_w}",
                s.h, s.w
            )));
        }
        let (y0, x0) = ((s.h - new_h) / 2, (s.w - new_w) / 2);
        let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, new_h, new_w));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..new_h {
                    for x in 0..new_w {
                        out.set(n, c, y, x, self.at(n, c, y0 + y, x0 + x));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Copy batch item `n` into a fresh tensor with batch size 1.
    pub fn slice_batch(&self, n: usize) -> Tensor4 {
        let s = self.shape;
        let per = s.c * s.h * s.w;
        Tensor4 {
            shape: Shape4::new(1, s.c, s.h, s.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack batch-1 tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_batch of empty list".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.c * s.h * s.w * items.len());
        for (i, t) in items.iter().enumerate() {
            if t.shape.c != s.c || t.shape.h != s.h || t.shape.w != s.w || t.shape.n != 1 {
                return Err(Error::ShapeMismatch {
                    context: format!("stack_batch item {i}"),
                    expected: format!("1x{}x{}x{}", s.c, s.h, s.w),
                    found: t.shape.to_string(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(items.len(), s.c, s.h, s.w),
            data,
        })
    }
}

pub(crate) fn same_shape(context: &str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: a.shape().to_string(),
            found: b.shape().to_string(),
        });
    }
    Ok(())
}

/// Upsampling filter for [`upsample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers (align-corners = false), edge-clamped.
    Bilinear,
}

// ---------------------------------------------------------------------------
// matmul kernels (used by conv2d via im2col)
// ---------------------------------------------------------------------------

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T  (dot products of rows)
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]  (rank-1 updates over the shared axis)
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

/// Output spatial size of a convolution: floor((size + 2*pad - k) / stride) + 1.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::InvalidArgument(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn check_conv_args(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    stride: usize,
) -> Result<(usize, usize, usize, usize)> {
    let (out_c, in_c, kh, kw) = (
        weight.shape().n,
        weight.shape().c,
        weight.shape().h,
        weight.shape().w,
    );
    if x.shape().c != in_c {
        return Err(Error::ShapeMismatch {
            context: "conv2d input channels".into(),
            expected: format!("input with {in_c} channels for weight {}", weight.shape()),
            found: x.shape().to_string(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel dims must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let bias_shape = Shape4::new(1, out_c, 1, 1);
    if bias.shape() != bias_shape {
        return Err(Error::ShapeMismatch {
            context: "conv2d bias".into(),
            expected: bias_shape.to_string(),
            found: bias.shape().to_string(),
        });
    }
    Ok((out_c, in_c, kh, kw))
}

/// Gather conv patches of one batch item into a (in_c*kh*kw) x (oh*ow) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &Tensor4,
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    let s = x.shape();
    let l = oh * ow;
    cols.fill(0.0);
    for ic in 0..s.c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ic * kh + ky) * kw + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x.at(n, ic, iy, ix as usize);
                    }
                }
            }
        }
    }
}

/// Scatter-add a (in_c*kh*kw) x (oh*ow) column matrix back into the input layout.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    n: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut Tensor4,
) {
    let s = dx.shape();
    let l = oh * ow;
    for ic in 0..s.c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ic * kh + ky) * kw + kx;
                let src = &cols[row * l..(row + 1) * l];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= s.w as isize {
                            continue;
                        }
                        let i = s.idx(n, ic, iy, ix as usize);
                        dx.data[i] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// 2-D convolution with zero padding.
///
/// `weight` is (out_c, in_c, kh, kw); `bias` is (1, out_c, 1, 1). Kernel dims
/// must be odd, stride >= 1.
pub fn conv2d(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<Tensor4> {
    let (out_c, in_c, kh, kw) = check_conv_args(x, weight, bias, stride)?;
    let s = x.shape();
    let oh = conv_out_dim(s.h, kh, stride, pad)?;
    let ow = conv_out_dim(s.w, kw, stride, pad)?;
    let k = in_c * kh * kw;
    let l = oh * ow;
    let mut out = Tensor4::zeros(Shape4::new(s.n, out_c, oh, ow));
    let mut cols = vec![0.0; k * l];
    for n in 0..s.n {
        im2col(x, n, kh, kw, stride, pad, oh, ow, &mut cols);
        let dst = &mut out.data_mut()[n * out_c * l..(n + 1) * out_c * l];
        matmul_acc(weight.data(), &cols, out_c, k, l, dst);
        for oc in 0..out_c {
            let b = bias.data()[oc];
            for v in dst[oc * l..(oc + 1) * l].iter_mut() {
                *v += b;
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian products of [`conv2d`]: gradients for input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Tensor4,
    stride: usize,
    pad: usize,
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4, Tensor4) {
    let ws = weight.shape();
    let (out_c, in_c, kh, kw) = (ws.n, ws.c, ws.h, ws.w);
    let s = x.shape();
    let go = grad_out.shape();
    let (oh, ow) = (go.h, go.w);
    let k = in_c * kh * kw;
    let l = oh * ow;

    let mut dx = Tensor4::zeros(s);
    let mut dw = Tensor4::zeros(ws);
    let mut db = Tensor4::zeros(Shape4::new(1, out_c, 1, 1));
    let mut cols = vec![0.0; k * l];
    let mut dcols = vec![0.0; k * l];

    for n in 0..s.n {
        let g = &grad_out.data()[n * out_c * l..(n + 1) * out_c * l];
        // bias: plain sum over spatial positions
        for oc in 0..out_c {
            db.data_mut()[oc] += g[oc * l..(oc + 1) * l].iter().sum::<f64>();
        }
        // weight: dW += g * cols^T
        im2col(x, n, kh, kw, stride, pad, oh, ow, &mut cols);
        matmul_nt_acc(g, &cols, out_c, l, k, dw.data_mut());
        // input: dcols = W^T * g, then scatter back
        dcols.fill(0.0);
        matmul_tn_acc(weight.data(), g, k, out_c, l, &mut dcols);
        col2im_acc(&dcols, n, kh, kw, stride, pad, oh, ow, &mut dx);
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

/// Non-overlapping k x k mean pooling. Spatial dims must be divisible by k.
pub fn avg_pool(x: &Tensor4, k: usize) -> Result<Tensor4> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "avg_pool window must be >= 1".into(),
        ));
    }
    let s = x.shape();
    if !s.h.is_multiple_of(k) {
        return Err(Error::NotDivisible {
            context: "avg_pool height".into(),
            dim: s.h,
            by: k,
        });
    }
    if !s.w.is_multiple_of(k) {
        return Err(Error::NotDivisible {
            context: "avg_pool width".into(),
            dim: s.w,
            by: k,
        });
    }
    let (oh, ow) = (s.h / k, s.w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += x.at(n, c, oy * k + dy, ox * k + dx);
                        }
                    }
                    out.set(n, c, oy, ox, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over all spatial positions, per (batch, channel): output is (n, c, 1, 1).
pub fn global_avg_pool(x: &Tensor4) -> Tensor4 {
    let s = x.shape();
    let inv = 1.0 / (s.h * s.w) as f64;
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let mut acc = 0.0;
            for y in 0..s.h {
                for x_ in 0..s.w {
                    acc += x.at(n, c, y, x_);
                }
            }
            out.set(n, c, 0, 0, acc * inv);
        }
    }
    out
}

/// Integer-factor upsampling. Bilinear uses half-pixel centers with edge clamp.
pub fn upsample(x: &Tensor4, factor: usize, mode: UpsampleMode) -> Result<Tensor4> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be >= 1".into(),
        ));
    }
    let s = x.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, oh, ow));
    match mode {
        UpsampleMode::Nearest => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out.set(n, c, oy, ox, x.at(n, c, oy / factor, ox / factor));
                        }
                    }
                }
            }
        }
        UpsampleMode::Bilinear => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for oy in 0..oh {
                        let (y0, y1, fy) = bilinear_taps(oy, factor, s.h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = bilinear_taps(ox, factor, s.w);
                            let v = x.at(n, c, y0, x0) * (1.0 - fy) * (1.0 - fx)
                                + x.at(n, c, y0, x1) * (1.0 - fy) * fx
                                + x.at(n, c, y1, x0) * fy * (1.0 - fx)
                                + x.at(n, c, y1, x1) * fy * fx;
                            out.set(n, c, oy, ox, v);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mirror an out-of-range index back into [0, n) with the edge sample
/// repeated ([b a | a b]); this extension keeps normalized filters
/// mean-preserving and kills gradients on constant fields.
#[inline]
pub(crate) fn mirror_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Source taps and interpolation weight for one output coordinate.
#[inline]
pub(crate) fn bilinear_taps(o: usize, factor: usize, dim: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) / factor as f64 - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let i0 = (floor.max(0.0) as usize).min(dim - 1);
    let i1 = ((floor + 1.0).max(0.0) as usize).min(dim - 1);
    (i0, i1, frac)
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor4) -> Tensor4 {
    x.map(sigmoid_scalar)
}

/// Softmax over the channel axis, per (batch, y, x). Requires c >= 2.
pub fn channel_softmax(x: &Tensor4) -> Result<Tensor4> {
    let s = x.shape();
    if s.c < 2 {
        return Err(Error::InvalidArgument(format!(
            "channel_softmax needs at least 2 channels, got {}",
            s.c
        )));
    }
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for y in 0..s.h {
            for xx in 0..s.w {
                let mut m = f64::NEG_INFINITY;
                for c in 0..s.c {
                    m = m.max(x.at(n, c, y, xx));
                }
                let mut z = 0.0;
                for c in 0..s.c {
                    z += (x.at(n, c, y, xx) - m).exp();
                }
                for c in 0..s.c {
                    out.set(n, c, y, xx, (x.at(n, c, y, xx) - m).exp() / z);
                }
            }
        }
    }
    Ok(out)
}

/// Concatenate along the channel axis; all other dims must agree.
pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of empty list".into()))?;
    let s0 = first.shape();
    let mut total_c = 0;
    for (i, t) in xs.iter().enumerate() {
        let s = t.shape();
        if s.n != s0.n || s.h != s0.h || s.w != s0.w {
            return Err(Error::ShapeMismatch {
                context: format!("concat_channels input {i}"),
                expected: format!("{}x*x{}x{}", s0.n, s0.h, s0.w),
                found: s.to_string(),
            });
        }
        total_c += s.c;
    }
    let os = Shape4::new(s0.n, total_c, s0.h, s0.w);
    let mut out = Tensor4::zeros(os);
    let plane = s0.h * s0.w;
    for n in 0..s0.n {
        let mut dst_c = 0;
        for t in xs {
            let c = t.shape().c;
            let src = &t.data()[n * c * plane..(n + 1) * c * plane];
            let dst = &mut out.data_mut()[(n * total_c + dst_c) * plane..][..c * plane];
            dst.copy_from_slice(src);
            dst_c += c;
        }
    }
    Ok(out)
}
