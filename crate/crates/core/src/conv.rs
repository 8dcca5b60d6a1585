//! 2-D cross-correlation kernels built on im2col + sgemm.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Shape, Tensor};

/// Stride, dilation and zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self { stride, dilation, padding }
    }

    /// Stride 1 with the padding that keeps spatial extents for a `k×k` kernel.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Self { stride: 1, dilation, padding: dilation * (k - 1) / 2 }
    }

    fn out_extent(&self, len: usize, k: usize) -> Option<usize> {
        let reach = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        (padded >= reach).then(|| (padded - reach) / self.stride + 1)
    }
}

/// Validates operand shapes and returns the output shape.
pub fn output_shape(
    input: Shape,
    weight: Shape,
    bias: Option<Shape>,
    geom: ConvGeom,
) -> Result<Shape> {
    if geom.stride == 0 || geom.dilation == 0 {
        return Err(invalid!("stride and dilation must be positive"));
    }
    if weight.h != weight.w {
        return Err(shape_err!("kernel must be square, got {}x{}", weight.h, weight.w));
    }
    if weight.h % 2 == 0 {
        return Err(invalid!("kernel size must be odd, got {}", weight.h));
    }
    if input.c != weight.c {
        return Err(shape_err!(
            "conv input has {} channels but weight {weight} expects {}",
            input.c,
            weight.c
        ));
    }
    if let Some(b) = bias {
        if b.numel() != weight.n {
            return Err(shape_err!("bias {b} does not match {} output channels", weight.n));
        }
    }
    let k = weight.h;
    let (oh, ow) = match (geom.out_extent(input.h, k), geom.out_extent(input.w, k)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(shape_err!(
                "input {input} too small for kernel {k} with dilation {} and padding {}",
                geom.dilation,
                geom.padding
            ))
        }
    };
    Ok(Shape::new(input.n, weight.n, oh, ow))
}

/// Row-major `c = alpha * a·b + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
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

struct Layout {
    input: Shape,
    out: Shape,
    k: usize,
    geom: ConvGeom,
}

impl Layout {
    fn rows(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.out.plane()
    }

    /// 1×1, stride 1, unpadded: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Source coordinate for output index `o` and kernel tap `t` along one axis.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let pos = (o * self.geom.stride + t * self.geom.dilation) as isize - self.geom.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, sample: &[f32], cols: &mut [f32]) {
        let (ih, iw) = (self.input.h, self.input.w);
        let (oh, ow) = (self.out.h, self.out.w);
        let p = self.cols();
        for ci in 0..self.input.c {
            let plane = &sample[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        match self.src(oy, ky, ih) {
                            Some(sy) => {
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, iw) {
                                        Some(sx) => plane[sy * iw + sx],
                                        None => 0.0,
                                    };
                                }
                            }
                            None => line.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], sample: &mut [f32]) {
        let (ih, iw) = (self.input.h, self.input.w);
        let (oh, ow) = (self.out.h, self.out.w);
        let p = self.cols();
        for ci in 0..self.input.c {
            let plane = &mut sample[ci * ih * iw..(ci + 1) * ih * iw];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let Some(sy) = self.src(oy, ky, ih) else { continue };
                        for ox in 0..ow {
                            if let Some(sx) = self.src(ox, kx, iw) {
                                plane[sy * iw + sx] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding; `weight` is `(out_c, in_c, k, k)`.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<Tensor> {
    let out = output_shape(input.shape(), weight.shape(), bias.map(Tensor::shape), geom)?;
    let lay = Layout { input: input.shape(), out, k: weight.shape().h, geom };
    let (rows, p) = (lay.rows(), lay.cols());
    let in_len = input.shape().c * input.shape().plane();
    let out_len = out.c * p;
    let mut data = vec![0.0f32; out.numel()];
    let mut cols = if lay.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * p] };
    for n in 0..out.n {
        let sample = &input.data()[n * in_len..(n + 1) * in_len];
        let dst = &mut data[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * p..(o + 1) * p].fill(bv);
            }
        }
        let b_mat: &[f32] = if lay.is_pointwise() {
            sample
        } else {
            lay.im2col(sample, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(out.c, rows, p, weight.data(), (rows, 1), b_mat, (p, 1), beta, dst);
    }
    Tensor::new(out, data)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    geom: ConvGeom,
    grad_out: &[f32],
    want: (bool, bool, bool),
) -> Result<ConvGrads> {
    let out = output_shape(input.shape(), weight.shape(), None, geom)?;
    if grad_out.len() != out.numel() {
        return Err(shape_err!("conv grad of length {} for output {out}", grad_out.len()));
    }
    let (want_in, want_w, want_b) = want;
    let lay = Layout { input: input.shape(), out, k: weight.shape().h, geom };
    let (rows, p) = (lay.rows(), lay.cols());
    let in_len = input.shape().c * input.shape().plane();
    let out_len = out.c * p;

    let mut g_in = want_in.then(|| vec![0.0f32; input.numel()]);
    let mut g_w = want_w.then(|| vec![0.0f32; weight.numel()]);
    let g_b = want_b.then(|| {
        let mut gb = vec![0.0f64; out.c];
        for n in 0..out.n {
            for (o, acc) in gb.iter_mut().enumerate() {
                let start = n * out_len + o * p;
                *acc += grad_out[start..start + p].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        gb.into_iter().map(|v| v as f32).collect::<Vec<_>>()
    });

    let pointwise = lay.is_pointwise();
    let mut cols = vec![0.0f32; rows * p];
    for n in 0..out.n {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        let sample = &input.data()[n * in_len..(n + 1) * in_len];
        if let Some(gw) = g_w.as_mut() {
            let b_mat: &[f32] = if pointwise {
                sample
            } else {
                lay.im2col(sample, &mut cols);
                &cols
            };
            // gw (out_c × rows) += go (out_c × p) · colsᵀ (p × rows)
            gemm(out.c, p, rows, go, (p, 1), b_mat, (1, p), 1.0, gw);
        }
        if let Some(gi) = g_in.as_mut() {
            let dst = &mut gi[n * in_len..(n + 1) * in_len];
            // gcols (rows × p) = wᵀ (rows × out_c) · go (out_c × p)
            if pointwise {
                gemm(rows, out.c, p, weight.data(), (1, rows), go, (p, 1), 0.0, dst);
            } else {
                gemm(rows, out.c, p, weight.data(), (1, rows), go, (p, 1), 0.0, &mut cols);
                lay.col2im(&cols, dst);
            }
        }
    }
    Ok(ConvGrads { input: g_in, weight: g_w, bias: g_b })
}
