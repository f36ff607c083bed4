//! Scalar abstraction for the numeric core.
//!
//! Everything under the math layer (tensors, diffusion, objectives, metrics)
//! is generic over [`Real`]; the crate root pins `f64` aliases for the
//! trainers and the CLI.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating-point scalar usable throughout the numeric core: f32 or f64.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossless-enough conversion from an `f64` literal.
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 literal representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Kahan-compensated sum; the result is reproducible to ~1e-12 relative
/// under permutations of the inputs.
pub fn kahan_sum<T: Real>(values: impl IntoIterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_sum_is_permutation_stable() {
        let mut values: Vec<f64> = (0..2000)
            .map(|i| ((i * 2654435761u64 as usize) % 1000) as f64 * 1e-7 + 1.0e3)
            .collect();
        let a = kahan_sum(values.iter().copied());
        values.reverse();
        let b = kahan_sum(values.iter().copied());
        assert!((a - b).abs() / a.abs() < 1e-14);
    }
}

