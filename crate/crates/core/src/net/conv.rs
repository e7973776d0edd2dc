//! 2D convolution kernels over samples-as-columns batches.
//!
//! A batch column holds one image flattened channel-major: entry
//! `(ch, y, x)` lives at `ch*H*W + y*W + x`. Filters are stored as a matrix
//! with one row per output channel and the `(in_channel, ky, kx)` footprint
//! flattened along the columns, so growing output channels appends rows and
//! growing input channels appends a contiguous block to every row.

use crate::linalg::Matrix;
use crate::{Error, Result, Scalar};

/// Shape descriptor for one convolutional layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Stride-1 geometry with symmetric padding that preserves the spatial
    /// extent (odd kernels).
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            in_h,
            in_w,
            stride: 1,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn output_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    /// Flattened filter footprint: columns of the weight matrix.
    pub fn weight_cols(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn macs_per_sample(&self) -> u64 {
        (self.out_channels * self.out_h() * self.out_w() * self.weight_cols()) as u64
    }
}

/// Cross-correlation forward pass: `z[(o,oy,ox), n] = Σ w[o,(i,ky,kx)] h[(i,y,x), n]`.
pub(crate) fn conv_forward<T: Scalar>(
    weights: &Matrix<T>,
    geom: &ConvGeom,
    input: &Matrix<T>,
    bias: Option<&[T]>,
) -> Result<Matrix<T>> {
    if input.rows() != geom.input_len() {
        return Err(Error::Dimension(format!(
            "conv input rows {} != {}",
            input.rows(),
            geom.input_len()
        )));
    }
    if weights.rows() != geom.out_channels || weights.cols() != geom.weight_cols() {
        return Err(Error::Dimension("conv weights do not match geometry".into()));
    }
    let n = input.cols();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut out = Matrix::zeros(geom.output_len(), n);
    for s in 0..n {
        for o in 0..geom.out_channels {
            let wrow = weights.row(o);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(T::zero(), |b| b[o]);
                    for i in 0..geom.in_channels {
                        for ky in 0..geom.kernel_h {
                            let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if y < 0 || y >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel_w {
                                let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if x < 0 || x >= geom.in_w as isize {
                                    continue;
                                }
                                let w = wrow[(i * geom.kernel_h + ky) * geom.kernel_w + kx];
                                let v = input
                                    .get((i * geom.in_h + y as usize) * geom.in_w + x as usize, s);
                                acc += w * v;
                            }
                        }
                    }
                    out.set((o * oh + oy) * ow + ox, s, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Weight gradient: correlate the input with the output deltas.
///
/// Also used with the auxiliary geometry to produce the conv cross-gradient.
pub(crate) fn conv_grad_weights<T: Scalar>(
    geom: &ConvGeom,
    input: &Matrix<T>,
    delta_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    if input.rows() != geom.input_len() || delta_out.rows() != geom.output_len() {
        return Err(Error::Dimension(
            "conv_grad_weights: shapes do not match geometry".into(),
        ));
    }
    let n = input.cols();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut grad = Matrix::zeros(geom.out_channels, geom.weight_cols());
    for s in 0..n {
        for o in 0..geom.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = delta_out.get((o * oh + oy) * ow + ox, s);
                    if d == T::zero() {
                        continue;
                    }
                    for i in 0..geom.in_channels {
                        for ky in 0..geom.kernel_h {
                            let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if y < 0 || y >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel_w {
                                let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if x < 0 || x >= geom.in_w as isize {
                                    continue;
                                }
                                let v = input
                                    .get((i * geom.in_h + y as usize) * geom.in_w + x as usize, s);
                                let idx = (i * geom.kernel_h + ky) * geom.kernel_w + kx;
                                let cur = grad.get(o, idx);
                                grad.set(o, idx, cur + d * v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}

pub(crate) fn conv_grad_bias<T: Scalar>(geom: &ConvGeom, delta_out: &Matrix<T>) -> Vec<T> {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut grad = vec![T::zero(); geom.out_channels];
    for s in 0..delta_out.cols() {
        for o in 0..geom.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    grad[o] += delta_out.get((o * oh + oy) * ow + ox, s);
                }
            }
        }
    }
    grad
}

/// Input gradient: scatter output deltas back through the filters.
pub(crate) fn conv_grad_input<T: Scalar>(
    weights: &Matrix<T>,
    geom: &ConvGeom,
    delta_out: &Matrix<T>,
) -> Result<Matrix<T>> {
    if delta_out.rows() != geom.output_len() {
        return Err(Error::Dimension(
            "conv_grad_input: delta shape does not match geometry".into(),
        ));
    }
    let n = delta_out.cols();
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let mut grad = Matrix::zeros(geom.input_len(), n);
    for s in 0..n {
        for o in 0..geom.out_channels {
            let wrow = weights.row(o);
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = delta_out.get((o * oh + oy) * ow + ox, s);
                    if d == T::zero() {
                        continue;
                    }
                    for i in 0..geom.in_channels {
                        for ky in 0..geom.kernel_h {
                            let y = (oy * geom.stride + ky) as isize - geom.pad as isize;
                            if y < 0 || y >= geom.in_h as isize {
                                continue;
                            }
                            for kx in 0..geom.kernel_w {
                                let x = (ox * geom.stride + kx) as isize - geom.pad as isize;
                                if x < 0 || x >= geom.in_w as isize {
                                    continue;
                                }
                                let w = wrow[(i * geom.kernel_h + ky) * geom.kernel_w + kx];
                                let idx = (i * geom.in_h + y as usize) * geom.in_w + x as usize;
                                let cur = grad.get(idx, s);
                                grad.set(idx, s, cur + d * w);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad)
}
