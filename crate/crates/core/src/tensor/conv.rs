//! 2-D cross-correlation and its transpose, with vector-Jacobian products.
//!
//! Both directions go through im2col so the heavy lifting is one GEMM per
//! sample. Kernels follow the usual layouts: `(C_out, C_in, k, k)` for
//! `conv2d` and `(C_in, C_out, k, k)` for `conv_transpose2d`, which makes a
//! transposed convolution with the same buffer the exact adjoint of the
//! forward convolution.

use super::Tensor4;
use crate::error::{Error, Result};

/// Gradients returned by the convolution VJPs.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor4,
    pub kernel: Tensor4,
    pub bias: Tensor4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn output_extent(len: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = len + 2 * padding;
    if padded < k {
        return Err(Error::Config(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// C = A·B (+ beta·C) where `a_t`/`b_t` request transposed reads of
/// row-major buffers. Shapes are those of the logical (possibly transposed)
/// operands: A is m×k, B is k×n, C is m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
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

fn im2col(src: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dst: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn square_kernel(kernel: &Tensor4) -> Result<usize> {
    let [_, _, kh, kw] = kernel.dims();
    if kh != kw {
        return Err(Error::Config(format!("only square kernels are supported, got {kh}x{kw}")));
    }
    Ok(kh)
}

fn check_bias(bias: &Tensor4, channels: usize) -> Result<()> {
    if bias.dims() != [1, channels, 1, 1] {
        return Err(Error::shape(
            format!("bias {:?}", bias.dims()),
            format!("expected [1, {channels}, 1, 1]"),
        ));
    }
    Ok(())
}

fn conv_geometry(x: &Tensor4, kernel: &Tensor4, stride: usize, padding: usize) -> Result<Geometry> {
    let k = square_kernel(kernel)?;
    let [_, c_in, h, w] = x.dims();
    if kernel.dims()[1] != c_in {
        return Err(Error::shape(
            format!("input {:?}", x.dims()),
            format!("kernel {:?}", kernel.dims()),
        ));
    }
    Ok(Geometry {
        channels: c_in,
        height: h,
        width: w,
        k,
        stride,
        padding,
        out_h: output_extent(h, k, stride, padding)?,
        out_w: output_extent(w, k, stride, padding)?,
    })
}

/// Cross-correlation of `x` with `kernel` plus per-channel `bias`.
///
/// Output extent is `floor((H + 2p - k) / s) + 1`; trailing input rows that
/// no window reaches receive zero gradient.
pub fn conv2d(x: &Tensor4, kernel: &Tensor4, bias: &Tensor4, stride: usize, padding: usize) -> Result<Tensor4> {
    let g = conv_geometry(x, kernel, stride, padding)?;
    let c_out = kernel.dims()[0];
    check_bias(bias, c_out)?;
    let mut out = Tensor4::zeros([x.batch(), c_out, g.out_h, g.out_w]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for n in 0..x.batch() {
        im2col(x.sample(n), &g, &mut cols);
        let dst = out.sample_mut(n);
        for (co, &b) in bias.data().iter().enumerate() {
            dst[co * g.cols()..(co + 1) * g.cols()].fill(b);
        }
        gemm(c_out, g.rows(), g.cols(), kernel.data(), false, &cols, false, dst, 1.0);
    }
    Ok(out)
}

/// VJP of [`conv2d`] for upstream gradient `grad_out`.
pub fn conv2d_vjp(
    x: &Tensor4,
    kernel: &Tensor4,
    stride: usize,
    padding: usize,
    grad_out: &Tensor4,
) -> Result<ConvGrads> {
    let g = conv_geometry(x, kernel, stride, padding)?;
    let c_out = kernel.dims()[0];
    let expected = [x.batch(), c_out, g.out_h, g.out_w];
    if grad_out.dims() != expected {
        return Err(Error::shape(format!("grad {:?}", grad_out.dims()), format!("output {expected:?}")));
    }
    let mut dx = Tensor4::zeros(x.dims());
    let mut dk = Tensor4::zeros(kernel.dims());
    let mut db = vec![0.0; c_out];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let mut dcols = vec![0.0; g.rows() * g.cols()];
    for n in 0..x.batch() {
        let go = grad_out.sample(n);
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += go[co * g.cols()..(co + 1) * g.cols()].iter().sum::<f64>();
        }
        im2col(x.sample(n), &g, &mut cols);
        gemm(c_out, g.cols(), g.rows(), go, false, &cols, true, dk.data_mut(), 1.0);
        gemm(g.rows(), c_out, g.cols(), kernel.data(), true, go, false, &mut dcols, 0.0);
        col2im(&dcols, &g, dx.sample_mut(n));
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: Tensor4::channel_vector(db),
    })
}

fn transpose_geometry(x: &Tensor4, kernel: &Tensor4, stride: usize) -> Result<(Geometry, usize)> {
    let k = square_kernel(kernel)?;
    let [_, c_in, h, w] = x.dims();
    let [k_in, c_out, _, _] = kernel.dims();
    if k_in != c_in {
        return Err(Error::shape(
            format!("input {:?}", x.dims()),
            format!("kernel {:?}", kernel.dims()),
        ));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    // Geometry of the equivalent forward convolution that maps the
    // upsampled output back onto the input grid.
    let g = Geometry {
        channels: c_out,
        height: (h - 1) * stride + k,
        width: (w - 1) * stride + k,
        k,
        stride,
        padding: 0,
        out_h: h,
        out_w: w,
    };
    Ok((g, c_in))
}

/// Transposed convolution (no padding): output extent `(H - 1)·s + k`.
pub fn conv_transpose2d(x: &Tensor4, kernel: &Tensor4, bias: &Tensor4, stride: usize) -> Result<Tensor4> {
    let (g, c_in) = transpose_geometry(x, kernel, stride)?;
    check_bias(bias, g.channels)?;
    let mut out = Tensor4::zeros([x.batch(), g.channels, g.height, g.width]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for n in 0..x.batch() {
        gemm(g.rows(), c_in, g.cols(), kernel.data(), true, x.sample(n), false, &mut cols, 0.0);
        let dst = out.sample_mut(n);
        col2im(&cols, &g, dst);
        let plane = g.height * g.width;
        for (co, &b) in bias.data().iter().enumerate() {
            dst[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}

/// VJP of [`conv_transpose2d`].
pub fn conv_transpose2d_vjp(x: &Tensor4, kernel: &Tensor4, stride: usize, grad_out: &Tensor4) -> Result<ConvGrads> {
    let (g, c_in) = transpose_geometry(x, kernel, stride)?;
    let expected = [x.batch(), g.channels, g.height, g.width];
    if grad_out.dims() != expected {
        return Err(Error::shape(format!("grad {:?}", grad_out.dims()), format!("output {expected:?}")));
    }
    let mut dx = Tensor4::zeros(x.dims());
    let mut dk = Tensor4::zeros(kernel.dims());
    let mut db = vec![0.0; g.channels];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let plane = g.height * g.width;
    for n in 0..x.batch() {
        let go = grad_out.sample(n);
        for (co, acc) in db.iter_mut().enumerate() {
            *acc += go[co * plane..(co + 1) * plane].iter().sum::<f64>();
        }
        im2col(go, &g, &mut cols);
        gemm(c_in, g.rows(), g.cols(), kernel.data(), false, &cols, false, dx.sample_mut(n), 0.0);
        gemm(c_in, g.cols(), g.rows(), x.sample(n), false, &cols, true, dk.data_mut(), 1.0);
    }
    Ok(ConvGrads {
        input: dx,
        kernel: dk,
        bias: Tensor4::channel_vector(db),
    })
}
