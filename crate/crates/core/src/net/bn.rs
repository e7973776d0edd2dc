//! Batch normalization over samples-as-columns batches.
//!
//! Each feature (row) is normalized with its biased batch statistics:
//! `y = scale * (x - mean) / sqrt(var + eps) + shift`. With an all-zero
//! feature the output is the shift alone and the input gradient is scaled by
//! `scale / sqrt(eps)`.

use crate::linalg::Matrix;
use crate::{lit, Scalar};

/// Batch statistics captured by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// `1 / sqrt(var + eps)` per feature.
    pub inv_std: Vec<T>,
    /// Normalized inputs `(x - mean) / sqrt(var + eps)`.
    pub x_hat: Matrix<T>,
}

/// `weights` is `2 x width`: row 0 scale, row 1 shift.
pub(crate) fn bn_forward<T: Scalar>(
    weights: &Matrix<T>,
    eps: T,
    input: &Matrix<T>,
) -> (Matrix<T>, BnStats<T>) {
    let (width, n) = input.shape();
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut mean = vec![T::zero(); width];
    let mut inv_std = vec![T::zero(); width];
    for f in 0..width {
        let row = input.row(f);
        let m: T = row.iter().copied().sum::<T>() * inv_n;
        let v: T = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() * inv_n;
        mean[f] = m;
        inv_std[f] = T::one() / (v + eps).sqrt();
    }
    let mut x_hat = Matrix::zeros(width, n);
    let mut out = Matrix::zeros(width, n);
    for f in 0..width {
        let scale = weights.get(0, f);
        let shift = weights.get(1, f);
        for s in 0..n {
            let xh = (input.get(f, s) - mean[f]) * inv_std[f];
            x_hat.set(f, s, xh);
            out.set(f, s, scale * xh + shift);
        }
    }
    (out, BnStats { mean, inv_std, x_hat })
}

/// Returns the `2 x width` parameter gradient (scale, shift) and the input
/// gradient.
pub(crate) fn bn_backward<T: Scalar>(
    weights: &Matrix<T>,
    stats: &BnStats<T>,
    delta_out: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>) {
    let (width, n) = delta_out.shape();
    let inv_n = T::one() / lit::<T>(n as f64);
    let mut grad_w = Matrix::zeros(2, width);
    let mut delta_in = Matrix::zeros(width, n);
    for f in 0..width {
        let scale = weights.get(0, f);
        let mut dscale = T::zero();
        let mut dshift = T::zero();
        for s in 0..n {
            let d = delta_out.get(f, s);
            dscale += d * stats.x_hat.get(f, s);
            dshift += d;
        }
        grad_w.set(0, f, dscale);
        grad_w.set(1, f, dshift);

        let mean_d = dshift * inv_n;
        let mean_dxh = dscale * inv_n;
        for s in 0..n {
            let d = delta_out.get(f, s);
            let xh = stats.x_hat.get(f, s);
            delta_in.set(f, s, scale * stats.inv_std[f] * (d - mean_d - xh * mean_dxh));
        }
    }
    (grad_w, delta_in)
}
