//! Toolkit for growing neural networks during training.
//!
//! The library is organized around five modules:
//!
//! - [`linalg`]: dense row-major matrices and a deterministic truncated SVD.
//! - [`net`]: a minimal reverse-mode core for sequential dense / conv /
//!   batch-norm networks, including the auxiliary-weight mechanism that
//!   exposes the cross-gradient matrix the growth initializers decompose.
//! - [`grow`]: growth mechanics (appending neurons, inserting layers) and
//!   the initializer strategies that fill the new weights.
//! - [`experiment`]: teacher-student tasks, growth-schedule training runs,
//!   and the verification studies.
//! - [`metrics`]: gradient-norm instrumentation, singular-vector alignment,
//!   correlation studies, and the metrics log text format.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the
//! crate-root aliases pin the default double-precision instantiation.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub mod experiment;
pub mod grow;
pub mod linalg;
pub mod metrics;
pub mod net;

/// Floating-point scalar the whole crate is generic over.
///
/// Beyond the `num-traits` arithmetic surface this adds the two pieces of
/// plumbing the toolkit needs: a bit-exact integer representation (for the
/// checkpoint text format) and standard-normal sampling.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + FromStr
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint headers; must match on load.
    const TAG: &'static str;

    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f64 {
    const TAG: &'static str = "f64";

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }

    fn from_bits_u64(bits: u64) -> Self {
        f64::from_bits(bits)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f32 {
    const TAG: &'static str = "f32";

    fn to_bits_u64(self) -> u64 {
        u64::from(self.to_bits())
    }

    fn from_bits_u64(bits: u64) -> Self {
        f32::from_bits(bits as u32)
    }

    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Convert an `f64` literal into the working scalar type.
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

// Default double-precision instantiations.
pub type Matrix64 = linalg::Matrix<f64>;
pub type SvdResult64 = linalg::SvdResult<f64>;
pub type Network64 = net::Network<f64>;
pub type GradientSet64 = net::GradientSet<f64>;
pub type CrossGradient64 = net::CrossGradient<f64>;
pub type InitResult64 = grow::InitResult<f64>;
pub type GrowthPlan64 = grow::GrowthPlan<f64>;
pub type Task64 = experiment::TeacherStudentTask<f64>;
pub type RunConfig64 = experiment::RunConfig<f64>;
pub type MetricsLog64 = metrics::MetricsLog<f64>;
