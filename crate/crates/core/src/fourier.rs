//! Centered, orthonormal 2-D DFT pair.
//!
//! Both image and k-space use the centered layout: the origin sits at
//! `(H/2, W/2)` (integer division). Each axis is scaled by `1/√N`, so the
//! forward/inverse pair is unitary.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::{FftDirection, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex k-space grid stored as two real planes in centered layout.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceGrid {
    height: usize,
    width: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl KSpaceGrid {
    pub fn zeros(height: usize, width: usize) -> Self {
        KSpaceGrid {
            height,
            width,
            re: vec![0.0; height * width],
            im: vec![0.0; height * width],
        }
    }

    pub fn new(height: usize, width: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        let n = height * width;
        if n == 0 || re.len() != n || im.len() != n {
            return Err(Error::shape("KSpaceGrid", &[height, width], &[re.len(), im.len()]));
        }
        Ok(KSpaceGrid {
            height,
            width,
            re,
            im,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 2] {
        [self.height, self.width]
    }

    /// `(2, H, W)` tensor: plane 0 real, plane 1 imaginary.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.re.clone();
        data.extend_from_slice(&self.im);
        Tensor::from_parts(vec![2, self.height, self.width], data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.shape()[0] != 2 {
            return Err(Error::InvalidArgument(format!(
                "k-space tensor must be (2, H, W), got {:?}",
                t.shape()
            )));
        }
        let (h, w) = (t.shape()[1], t.shape()[2]);
        let n = h * w;
        Self::new(h, w, t.data()[..n].to_vec(), t.data()[n..].to_vec())
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// In-place unnormalized 2-D FFT of a row-major `h × w` buffer.
fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, dir: FftDirection) {
    let (row_fft, col_fft) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft(w, dir), p.plan_fft(h, dir))
    });
    row_fft.process(buf);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        col_fft.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
}

/// Moves the centered origin `(h/2, w/2)` to `(0, 0)`.
fn uncenter<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = (i + h / 2) % h;
        for j in 0..w {
            out.push(src[si * w + (j + w / 2) % w]);
        }
    }
    out
}

/// Inverse of [`uncenter`].
fn center<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let si = (i + h - h / 2) % h;
        for j in 0..w {
            out.push(src[si * w + (j + w - w / 2) % w]);
        }
    }
    out
}

/// Forward transform of a real `h × w` plane.
pub fn forward_dft_plane(h: usize, w: usize, image: &[f64]) -> KSpaceGrid {
    assert_eq!(image.len(), h * w);
    let shifted: Vec<Complex<f64>> = uncenter(image, h, w)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    let mut buf = shifted;
    fft2(&mut buf, h, w, FftDirection::Forward);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let centered = center(&buf, h, w);
    KSpaceGrid {
        height: h,
        width: w,
        re: centered.iter().map(|c| c.re * scale).collect(),
        im: centered.iter().map(|c| c.im * scale).collect(),
    }
}

/// Inverse transform; returns the real and imaginary image planes.
pub fn inverse_dft_planes(k: &KSpaceGrid) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = (k.height, k.width);
    let packed: Vec<Complex<f64>> = k
        .re
        .iter()
        .zip(&k.im)
        .map(|(&r, &i)| Complex::new(r, i))
        .collect();
    let mut buf = uncenter(&packed, h, w);
    fft2(&mut buf, h, w, FftDirection::Inverse);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let centered = center(&buf, h, w);
    (
        centered.iter().map(|c| c.re * scale).collect(),
        centered.iter().map(|c| c.im * scale).collect(),
    )
}

fn plane_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w)),
        [1, h, w] | [1, 1, h, w] => Ok((*h, *w)),
        other => Err(Error::InvalidArgument(format!(
            "expected a single image plane (H, W), got {other:?}"
        ))),
    }
}

/// Forward DFT of a real image `[H, W]` (singleton leading axes are accepted).
pub fn forward_dft(image: &Tensor) -> Result<KSpaceGrid> {
    let (h, w) = plane_dims(image)?;
    Ok(forward_dft_plane(h, w, image.data()))
}

/// Inverse DFT to `(re, im)` image tensors of shape `[H, W]`.
pub fn inverse_dft(k: &KSpaceGrid) -> (Tensor, Tensor) {
    let (re, im) = inverse_dft_planes(k);
    let shape = vec![k.height, k.width];
    (Tensor::from_parts(shape.clone(), re), Tensor::from_parts(shape, im))
}
