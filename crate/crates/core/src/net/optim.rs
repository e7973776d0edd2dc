//! Gradient-descent updates: SGD with momentum for training runs and Adam
//! for the iterative initializers.

use crate::linalg::Matrix;
use crate::net::{GradientSet, Network};
use crate::{lit, Error, Result, Scalar};

/// Weight-shaped buffer; one per layer (velocity, gradients, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBuf<T> {
    pub weights: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

/// Momentum state matching a network layer-for-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<LayerBuf<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        let velocity = net
            .layers
            .iter()
            .map(|l| LayerBuf {
                weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: l.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
            })
            .collect();
        Self { velocity }
    }

    pub fn matches(&self, net: &Network<T>) -> bool {
        self.velocity.len() == net.layers.len()
            && self.velocity.iter().zip(&net.layers).all(|(v, l)| {
                v.weights.shape() == l.weights.shape()
                    && v.bias.as_ref().map(Vec::len) == l.bias.as_ref().map(Vec::len)
            })
    }
}

/// One SGD step: `v <- momentum * v + g`, `w <- w - lr * v`.
///
/// Zero momentum is plain gradient descent.
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &GradientSet<T>,
    lr: T,
    momentum: T,
    state: &mut SgdState<T>,
) -> Result<()> {
    if grads.layers.len() != net.layers.len() || !state.matches(net) {
        return Err(Error::State(
            "gradients or momentum state do not match the network".into(),
        ));
    }
    for g in &grads.layers {
        if g.weights.data().iter().any(|v| !v.is_finite())
            || g.bias
                .as_ref()
                .is_some_and(|b| b.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    for ((layer, grad), vel) in net
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.velocity)
    {
        if grad.weights.shape() != layer.weights.shape() {
            return Err(Error::Dimension("gradient shape mismatch".into()));
        }
        for ((w, &g), v) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(grad.weights.data())
            .zip(vel.weights.data_mut())
        {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
        if let (Some(b), Some(gb), Some(vb)) = (&mut layer.bias, &grad.bias, &mut vel.bias) {
            for ((w, &g), v) in b.iter_mut().zip(gb).zip(vb.iter_mut()) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
    Ok(())
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamConfig<T> {
    pub fn with_lr(lr: T) -> Self {
        Self {
            lr,
            beta1: lit(0.9),
            beta2: lit(0.999),
            eps: lit(1e-8),
        }
    }
}

impl<T: Scalar> Default for AdamConfig<T> {
    fn default() -> Self {
        Self::with_lr(lit(1e-3))
    }
}

/// First/second moment estimates for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Matrix<T>,
    v: Matrix<T>,
    t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }
}

/// Standard Adam update with bias correction.
pub fn adam_step<T: Scalar>(
    params: &mut Matrix<T>,
    grad: &Matrix<T>,
    state: &mut AdamState<T>,
    cfg: &AdamConfig<T>,
) -> Result<()> {
    if params.shape() != grad.shape() || params.shape() != state.m.shape() {
        return Err(Error::Dimension("adam_step shape mismatch".into()));
    }
    if grad.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    state.t += 1;
    let t = lit::<T>(f64::from(state.t));
    let bc1 = T::one() - cfg.beta1.powf(t);
    let bc2 = T::one() - cfg.beta2.powf(t);
    for ((p, &g), (m, v)) in params
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut()))
    {
        *m = cfg.beta1 * *m + (T::one() - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (T::one() - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
