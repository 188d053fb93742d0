//! Raw forward/backward kernels. Everything here is stateless; the tape in
//! [`crate::autodiff`] decides which of them to call.
//!
//! Convolutions lower to im2col + a single-threaded GEMM. For fixed shapes the
//! GEMM has a fixed blocking and summation order, so results are reproducible
//! bit for bit on a given build and machine.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise nonlinearity applied after a layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => {
                Err(Error::Config(format!("leaky relu slope must be in (0,1), got {s}")))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    pub fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Spatial size after a convolution, or a configuration error if it would be < 1.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::Config(format!("kernel {kernel} and stride {stride} must be positive")));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Config(format!(
            "input size {input} with padding {padding} is smaller than kernel {kernel}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Spatial size after a transposed convolution: (n − 1)·s − 2p + k.
pub fn conv_transpose_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 || input == 0 {
        return Err(Error::Config("kernel, stride and input size must be positive".into()));
    }
    let full = (input - 1) * stride + kernel;
    if full <= 2 * padding {
        return Err(Error::Config(format!(
            "transposed convolution of size {input} (k={kernel}, s={stride}, p={padding}) has no output"
        )));
    }
    Ok(full - 2 * padding)
}

#[derive(Clone, Copy, Debug)]
struct Window {
    kernel: usize,
    stride: usize,
    padding: usize,
}

/// Unfolds one image `[c, h, w]` into `[c·k·k, oh·ow]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(img: &[f32], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize, cols: &mut [f32]) {
    let Window { kernel: k, stride: s, padding: p } = win;
    let plane = oh * ow;
    for ch in 0..c {
        let src = &img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * plane;
                let dst = &mut cols[row..row + plane];
                for y in 0..oh {
                    let iy = (y * s + ki) as isize - p as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `img` (which is zeroed first).
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, win: Window, oh: usize, ow: usize, img: &mut [f32]) {
    let Window { kernel: k, stride: s, padding: p } = win;
    img.fill(0.0);
    let plane = oh * ow;
    for ch in 0..c {
        let dst = &mut img[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ch * k + ki) * k + kj) * plane;
                let src = &cols[row..row + plane];
                for y in 0..oh {
                    let iy = (y * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for x in 0..ow {
                        let ix = (x * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a·b + beta·c` where `a` is m×k and `b` is k×n, either optionally
/// supplied in transposed storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices have exactly the lengths implied by (m, k, n) and the strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvShapes {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
}

fn conv_shapes(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvShapes> {
    let (n, cin, h, w) = x.dims4()?;
    let (cout, wcin, k, k2) = weight.dims4()?;
    if k != k2 {
        return Err(Error::Dimension(format!("non-square kernel {k}×{k2}")));
    }
    if wcin != cin {
        return Err(Error::Dimension(format!("convolution expects {wcin} input channels, input has {cin}")));
    }
    let oh = conv_output_size(h, k, stride, padding)?;
    let ow = conv_output_size(w, k, stride, padding)?;
    Ok(ConvShapes { n, cin, h, w, cout, k, oh, ow })
}

/// Cross-correlation of `x` `[n, cin, h, w]` with `weight` `[cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let sh = conv_shapes(x, weight, stride, padding)?;
    let win = Window { kernel: sh.k, stride, padding };
    let ckk = sh.cin * sh.k * sh.k;
    let plane = sh.oh * sh.ow;
    let mut cols = vec![0.0; ckk * plane];
    let mut out = vec![0.0; sh.n * sh.cout * plane];
    let in_stride = sh.cin * sh.h * sh.w;
    for b in 0..sh.n {
        im2col(&x.data()[b * in_stride..(b + 1) * in_stride], sh.cin, sh.h, sh.w, win, sh.oh, sh.ow, &mut cols);
        let dst = &mut out[b * sh.cout * plane..(b + 1) * sh.cout * plane];
        gemm(sh.cout, ckk, plane, weight.data(), false, &cols, false, 0.0, dst);
    }
    Tensor::new(vec![sh.n, sh.cout, sh.oh, sh.ow], out)
}

/// Gradients of [`conv2d`] with respect to its input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>)> {
    let sh = conv_shapes(x, weight, stride, padding)?;
    if grad_out.len() != sh.n * sh.cout * sh.oh * sh.ow {
        return Err(Error::Dimension(format!("upstream gradient of length {}", grad_out.len())));
    }
    let win = Window { kernel: sh.k, stride, padding };
    let ckk = sh.cin * sh.k * sh.k;
    let plane = sh.oh * sh.ow;
    let in_stride = sh.cin * sh.h * sh.w;
    let mut cols = vec![0.0; ckk * plane];
    let mut dx = need_input.then(|| vec![0.0; x.numel()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.numel()]);
    for b in 0..sh.n {
        let g = &grad_out[b * sh.cout * plane..(b + 1) * sh.cout * plane];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_stride..(b + 1) * in_stride], sh.cin, sh.h, sh.w, win, sh.oh, sh.ow, &mut cols);
            gemm(sh.cout, plane, ckk, g, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(ckk, sh.cout, plane, weight.data(), true, g, false, 0.0, &mut cols);
            col2im(&cols, sh.cin, sh.h, sh.w, win, sh.oh, sh.ow, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    Ok((dx, dw))
}

fn conv_transpose_shapes(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<ConvShapes> {
    let (n, cin, h, w) = x.dims4()?;
    let (wcin, cout, k, k2) = weight.dims4()?;
    if k != k2 {
        return Err(Error::Dimension(format!("non-square kernel {k}×{k2}")));
    }
    if wcin != cin {
        return Err(Error::Dimension(format!("transposed convolution expects {wcin} input channels, input has {cin}")));
    }
    let oh = conv_transpose_output_size(h, k, stride, padding)?;
    let ow = conv_transpose_output_size(w, k, stride, padding)?;
    Ok(ConvShapes { n, cin, h, w, cout, k, oh, ow })
}

/// Transposed convolution of `x` `[n, cin, h, w]` with `weight` `[cin, cout, k, k]`;
/// the adjoint of [`conv2d`] with the same geometry.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let sh = conv_transpose_shapes(x, weight, stride, padding)?;
    let win = Window { kernel: sh.k, stride, padding };
    let ckk = sh.cout * sh.k * sh.k;
    let plane_in = sh.h * sh.w;
    let plane_out = sh.oh * sh.ow;
    let mut cols = vec![0.0; ckk * plane_in];
    let mut out = vec![0.0; sh.n * sh.cout * plane_out];
    for b in 0..sh.n {
        let xb = &x.data()[b * sh.cin * plane_in..(b + 1) * sh.cin * plane_in];
        gemm(ckk, sh.cin, plane_in, weight.data(), true, xb, false, 0.0, &mut cols);
        let dst = &mut out[b * sh.cout * plane_out..(b + 1) * sh.cout * plane_out];
        col2im(&cols, sh.cout, sh.oh, sh.ow, win, sh.h, sh.w, dst);
    }
    Tensor::new(vec![sh.n, sh.cout, sh.oh, sh.ow], out)
}

/// Gradients of [`conv_transpose2d`] with respect to its input and weight.
pub fn conv_transpose2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &[f32],
    stride: usize,
    padding: usize,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Vec<f32>>, Option<Vec<f32>>)> {
    let sh = conv_transpose_shapes(x, weight, stride, padding)?;
    if grad_out.len() != sh.n * sh.cout * sh.oh * sh.ow {
        return Err(Error::Dimension(format!("upstream gradient of length {}", grad_out.len())));
    }
    let win = Window { kernel: sh.k, stride, padding };
    let ckk = sh.cout * sh.k * sh.k;
    let plane_in = sh.h * sh.w;
    let plane_out = sh.oh * sh.ow;
    let mut cols = vec![0.0; ckk * plane_in];
    let mut dx = need_input.then(|| vec![0.0; x.numel()]);
    let mut dw = need_weight.then(|| vec![0.0; weight.numel()]);
    for b in 0..sh.n {
        let g = &grad_out[b * sh.cout * plane_out..(b + 1) * sh.cout * plane_out];
        im2col(g, sh.cout, sh.oh, sh.ow, win, sh.h, sh.w, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * sh.cin * plane_in..(b + 1) * sh.cin * plane_in];
            gemm(sh.cin, ckk, plane_in, weight.data(), false, &cols, false, 0.0, dst);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * sh.cin * plane_in..(b + 1) * sh.cin * plane_in];
            gemm(sh.cin, plane_in, ckk, xb, false, &cols, true, 1.0, dw);
        }
    }
    Ok((dx, dw))
}

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Per-sample, per-channel normalization without affine parameters.
/// Returns the output and the per-plane inverse standard deviations.
pub fn instance_norm(x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(n * c);
    for (p, (src, dst)) in x.data().chunks(plane).zip(out.chunks_mut(plane)).enumerate() {
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = (1.0 / (var + INSTANCE_NORM_EPS as f64).sqrt()) as f32;
        debug_assert!(p == inv_std.len());
        inv_std.push(inv);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean as f32) * inv;
        }
    }
    Ok((Tensor::new(vec![n, c, h, w], out)?, inv_std))
}

pub fn instance_norm_backward(y: &Tensor, inv_std: &[f32], grad_out: &[f32]) -> Result<Vec<f32>> {
    let (_, _, h, w) = y.dims4()?;
    let plane = h * w;
    let mut dx = vec![0.0; y.numel()];
    for (p, ((yp, gp), dp)) in y.data().chunks(plane).zip(grad_out.chunks(plane)).zip(dx.chunks_mut(plane)).enumerate()
    {
        let mean_g = gp.iter().map(|&g| g as f64).sum::<f64>() / plane as f64;
        let mean_gy = gp.iter().zip(yp).map(|(&g, &v)| (g * v) as f64).sum::<f64>() / plane as f64;
        let inv = inv_std[p];
        for ((d, &g), &v) in dp.iter_mut().zip(gp).zip(yp) {
            *d = inv * (g - mean_g as f32 - v * mean_gy as f32);
        }
    }
    Ok(dx)
}
