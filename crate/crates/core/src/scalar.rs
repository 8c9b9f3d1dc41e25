//! Scalar abstraction shared by the deterministic numerics.
//!
//! Likelihood evaluation, CRP probabilities, exposure densities and the
//! replication metrics are written once over [`Scalar`] and used with both
//! `f32` and `f64`. The stochastic samplers are `f64` only.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type usable by the model core: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn of_usize(x: usize) -> Self {
        Self::from_usize(x).expect("usize is representable in every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(sum(exp(xs)))` with max subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    let s: F = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Streaming log-sum-exp accumulator.
///
/// Keeps a running maximum and a rescaled sum so that adding terms never
/// overflows, whatever the magnitude of the inputs.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp<F> {
    max: F,
    sum: F,
}

impl<F: Scalar> Default for LogSumExp<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> LogSumExp<F> {
    pub fn new() -> Self {
        Self { max: F::neg_infinity(), sum: F::zero() }
    }

    /// Adds `exp(x)`; returns the factor by which the previous sum was rescaled
    /// (1 when the maximum did not move). Callers keeping companion sums that
    /// share this scale must multiply them by the returned factor.
    #[inline]
    pub fn push(&mut self, x: F) -> F {
        if x > self.max {
            let scale = if self.max.is_finite() { (self.max - x).exp() } else { F::zero() };
            self.sum = self.sum * scale + F::one();
            self.max = x;
            scale
        } else {
            self.sum += (x - self.max).exp();
            F::one()
        }
    }

    /// Weight of `exp(x)` relative to the current scale.
    #[inline]
    pub fn weight(&self, x: F) -> F {
        (x - self.max).exp()
    }

    #[inline]
    pub fn value(&self) -> F {
        if self.sum > F::zero() {
            self.max + self.sum.ln()
        } else {
            F::neg_infinity()
        }
    }

    #[inline]
    pub fn scaled_sum(&self) -> F {
        self.sum
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.sum <= F::zero()
    }
}
