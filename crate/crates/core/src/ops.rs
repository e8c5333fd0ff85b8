//! Forward and adjoint kernels for the handful of differentiable ops the
//! reconstruction network uses. The tape in [`crate::autodiff`] dispatches here.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};
use std::thread::LocalKey;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Arithmetic used inside the convolution GEMMs. Everything outside them
/// (and every stored tensor) stays in double precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

trait Scalar: Copy + Default + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn pool() -> &'static LocalKey<RefCell<Vec<Vec<Self>>>>;
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

thread_local! {
    static POOL_F64: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
    static POOL_F32: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn pool() -> &'static LocalKey<RefCell<Vec<Vec<f64>>>> {
        &POOL_F64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn pool() -> &'static LocalKey<RefCell<Vec<Vec<f32>>>> {
        &POOL_F32
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Per-thread recycled buffer. Contents on creation are unspecified, so every
/// user overwrites it in full before reading.
struct Scratch<T: Scalar>(Vec<T>);

impl<T: Scalar> Scratch<T> {
    fn new(len: usize) -> Self {
        let mut v = T::pool().with(|p| p.borrow_mut().pop()).unwrap_or_default();
        v.resize(len, T::default());
        Scratch(v)
    }
}

impl<T: Scalar> Drop for Scratch<T> {
    fn drop(&mut self) {
        let v = std::mem::take(&mut self.0);
        T::pool().with(|p| p.borrow_mut().push(v));
    }
}

impl<T: Scalar> Deref for Scratch<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Scalar> DerefMut for Scratch<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// `c = a·b + beta·c` for views described by explicit strides.
/// With `beta = 0` the previous contents of `c` are never read.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    assert!(a.len() >= (m.max(1) - 1) * rsa + (k.max(1) - 1) * csa + 1);
    assert!(b.len() >= (k.max(1) - 1) * rsb + (n.max(1) - 1) * csb + 1);
    assert!(c.len() >= (m.max(1) - 1) * rsc + (n.max(1) - 1) * csc + 1);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn narrow_into<T: Scalar>(src: &[f64], dst: &mut [T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::from_f64(s);
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], pad: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv2d input must be 4-D (B, C, H, W), got {input:?}"
            )));
        }
        if kernel.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel must be 4-D (Cout, Cin, kh, kw), got {kernel:?}"
            )));
        }
        if kernel[1] != input[1] {
            return Err(Error::shape(
                "conv2d (input channels)",
                &[kernel[1]],
                &[input[1]],
            ));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
            )));
        }
        Ok(ConvGeom {
            batch: input[0],
            cin: input[1],
            h,
            w,
            cout: kernel[0],
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: w + 2 * pad - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.oh, self.ow]
    }

    /// Source column range `[lo, hi)` of output columns whose tap `j` lands inside the image.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(j).min(self.ow);
        (lo, hi.max(lo))
    }

    /// Unfolds one image `[Cin, H, W]` into `[Cin·kh·kw, OH·OW]`, converting to `T`.
    fn im2col<T: Scalar>(&self, image: &[f64], cols: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let src = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let iy = oy + i;
                        if iy < self.pad || iy - self.pad >= self.h {
                            dst.fill(T::default());
                            continue;
                        }
                        let srow = &src[(iy - self.pad) * self.w..];
                        dst[..lo].fill(T::default());
                        dst[hi..].fill(T::default());
                        narrow_into(&srow[lo + j - self.pad..hi + j - self.pad], &mut dst[lo..hi]);
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating into `image`.
    fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [f64]) {
        let plane = self.out_plane();
        for c in 0..self.cin {
            let dst = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * plane..][..plane];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.oh {
                        let iy = oy + i;
                        if iy < self.pad || iy - self.pad >= self.h {
                            continue;
                        }
                        let drow = &mut dst[(iy - self.pad) * self.w + lo + j - self.pad..][..hi - lo];
                        for (d, s) in drow.iter_mut().zip(&row[oy * self.ow + lo..oy * self.ow + hi]) {
                            *d += s.to_f64();
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation, no bias.
///
/// `input` is `[B, Cin, H, W]`, `kernel` is `[Cout, Cin, kh, kw]`. With
/// `pad = (k - 1) / 2` and odd `k` the spatial size is preserved.
pub fn conv2d(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
    conv2d_with(input, kernel, pad, Precision::F64)
}

pub fn conv2d_with(input: &Tensor, kernel: &Tensor, pad: usize, precision: Precision) -> Result<Tensor> {
    match precision {
        Precision::F64 => conv2d_impl::<f64>(input, kernel, pad),
        Precision::F32 => conv2d_impl::<f32>(input, kernel, pad),
    }
}

fn conv2d_impl<T: Scalar>(input: &Tensor, kernel: &Tensor, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), pad)?;
    let (plen, plane) = (g.patch_len(), g.out_plane());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * plane;
    let mut k = Scratch::<T>::new(kernel.len());
    narrow_into(kernel.data(), &mut k);
    let mut cols = Scratch::<T>::new(plen * plane);
    let mut part = Scratch::<T>::new(out_stride);
    let mut out = Vec::with_capacity(g.batch * out_stride);
    for b in 0..g.batch {
        g.im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
        // Computed as outᵀ[plane, Cout] = colsᵀ · Kᵀ, which packs better.
        gemm(plane, plen, g.cout, &cols, (1, plane), &k, (1, plen), T::default(), &mut part, (1, plane));
        out.extend(part.iter().map(|v| v.to_f64()));
    }
    Ok(Tensor::from_parts(g.out_shape(), out))
}

/// Adjoints of [`conv2d`] with respect to its input and kernel.
///
/// Either gradient can be skipped; skipped entries come back as `None`.
pub fn conv2d_backward(
    upstream: &Tensor,
    saved_input: &Tensor,
    kernel: &Tensor,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    conv2d_backward_with(upstream, saved_input, kernel, pad, need_input, need_kernel, Precision::F64)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_with(
    upstream: &Tensor,
    saved_input: &Tensor,
    kernel: &Tensor,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
    precision: Precision,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    match precision {
        Precision::F64 => conv2d_backward_impl::<f64>(upstream, saved_input, kernel, pad, need_input, need_kernel),
        Precision::F32 => conv2d_backward_impl::<f32>(upstream, saved_input, kernel, pad, need_input, need_kernel),
    }
}

fn conv2d_backward_impl<T: Scalar>(
    upstream: &Tensor,
    saved_input: &Tensor,
    kernel: &Tensor,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(saved_input.shape(), kernel.shape(), pad)?;
    upstream.expect_shape("conv2d_backward (upstream)", &g.out_shape())?;
    let (plen, plane) = (g.patch_len(), g.out_plane());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * plane;

    let mut k = Scratch::<T>::new(kernel.len());
    narrow_into(kernel.data(), &mut k);
    let mut grad_input = need_input.then(|| vec![0.0; saved_input.len()]);
    let mut grad_kernel = need_kernel.then(|| Scratch::<T>::new(kernel.len()));
    let mut cols = Scratch::<T>::new(plen * plane);
    let mut up = Scratch::<T>::new(out_stride);
    for b in 0..g.batch {
        narrow_into(&upstream.data()[b * out_stride..(b + 1) * out_stride], &mut up);
        if let Some(gk) = grad_kernel.as_mut() {
            g.im2col(&saved_input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
            // gK[Cout, plen] += up[Cout, plane] · colsᵀ
            let beta = if b == 0 { T::default() } else { T::from_f64(1.0) };
            gemm(g.cout, plane, plen, &up, (plane, 1), &cols, (1, plane), beta, gk, (plen, 1));
        }
        if let Some(gi) = grad_input.as_mut() {
            // gcols[plen, plane] = Kᵀ[plen, Cout] · up[Cout, plane]
            gemm(plen, g.cout, plane, &k, (1, plen), &up, (plane, 1), T::default(), &mut cols, (plane, 1));
            g.col2im(&cols, &mut gi[b * in_stride..(b + 1) * in_stride]);
        }
    }
    Ok((
        grad_input.map(|d| Tensor::from_parts(saved_input.shape().to_vec(), d)),
        grad_kernel.map(|d| Tensor::from_parts(kernel.shape().to_vec(), d.iter().map(|v| v.to_f64()).collect())),
    ))
}

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor::from_parts(input.shape().to_vec(), data)
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(upstream: &Tensor, saved_input: &Tensor) -> Result<Tensor> {
    upstream.expect_shape("relu_backward", saved_input.shape())?;
    let data = upstream
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_parts(upstream.shape().to_vec(), data))
}

fn check_affine(context: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    if weight.ndim() != 2 {
        return Err(Error::InvalidArgument(format!(
            "affine weight must be 2-D, got {:?}",
            weight.shape()
        )));
    }
    let (nw, nc) = (weight.shape()[0], weight.shape()[1]);
    context.expect_shape("affine (context)", &[nc])?;
    bias.expect_shape("affine (bias)", &[nw])?;
    Ok((nw, nc))
}

/// `weight · context + bias`, no activation.
pub fn affine(context: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (nw, nc) = check_affine(context, weight, bias)?;
    let ctx = context.data();
    let out = weight
        .data()
        .chunks_exact(nc)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(ctx).map(|(w, c)| w * c).sum::<f64>() + b)
        .collect();
    Ok(Tensor::from_parts(vec![nw], out))
}

pub struct AffineGrads {
    pub context: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn affine_backward(
    upstream: &Tensor,
    context: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<AffineGrads> {
    let (nw, nc) = check_affine(context, weight, bias)?;
    upstream.expect_shape("affine_backward", &[nw])?;
    let up = upstream.data();
    let ctx = context.data();
    let mut gw = Vec::with_capacity(nw * nc);
    for &g in up {
        gw.extend(ctx.iter().map(|c| g * c));
    }
    let mut gc = vec![0.0; nc];
    for (row, &g) in weight.data().chunks_exact(nc).zip(up) {
        for (acc, w) in gc.iter_mut().zip(row) {
            *acc += w * g;
        }
    }
    Ok(AffineGrads {
        context: Tensor::from_parts(vec![nc], gc),
        weight: Tensor::from_parts(vec![nw, nc], gw),
        bias: upstream.clone(),
    })
}

/// Sum of squared differences over all elements divided by the leading (batch) extent.
pub fn l2_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    target.expect_shape("l2_loss", pred.shape())?;
    let batch = pred.shape().first().copied().unwrap_or(1) as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(s / batch)
}

/// Gradient of [`l2_loss`] w.r.t. `pred`, scaled by `upstream`.
pub fn l2_loss_backward(pred: &Tensor, target: &Tensor, upstream: f64) -> Result<Tensor> {
    target.expect_shape("l2_loss_backward", pred.shape())?;
    let batch = pred.shape().first().copied().unwrap_or(1) as f64;
    let k = 2.0 * upstream / batch;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| k * (p - t))
        .collect();
    Ok(Tensor::from_parts(pred.shape().to_vec(), data))
}
