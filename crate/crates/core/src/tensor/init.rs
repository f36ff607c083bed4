//! Deterministic fan-in-scaled parameter initialization.

use crate::rng::substream;
use crate::scalar::Real;
use crate::tensor::dense::{Tensor, TensorError};

/// Initialize a fully-connected stack described by consecutive layer widths.
///
/// For `spec = [n0, n1, ..., nk]` the result interleaves weights and biases:
/// `[W1 (n0 x n1), b1 (1 x n1), W2 (n1 x n2), b2 (1 x n2), ...]`.
/// Weights are drawn N(0, 1/fan_in); biases start at zero. The same
/// `(spec, seed)` always produces identical tensors.
pub fn init_params<T: Real>(spec: &[usize], seed: u64) -> Result<Vec<Tensor<T>>, TensorError> {
    if spec.len() < 2 {
        return Err(TensorError::Invalid(format!(
            "layer spec needs at least two widths, got {spec:?}"
        )));
    }
    if let Some(zero_at) = spec.iter().position(|&w| w == 0) {
        return Err(TensorError::Invalid(format!(
            "zero-width layer at position {zero_at} in {spec:?}"
        )));
    }
    let mut rng = substream(seed, 0);
    let mut params = Vec::with_capacity(2 * (spec.len() - 1));
    for pair in spec.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = T::cast(1.0 / (fan_in as f64).sqrt());
        let data: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::standard_normal(&mut rng) * scale)
            .collect();
        params.push(Tensor::from_parts_unchecked(vec![fan_in, fan_out], data));
        params.push(Tensor::zeros(&[1, fan_out]));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_spec_and_seed_is_identical() {
        let a: Vec<Tensor<f64>> = init_params(&[4, 8, 2], 7).unwrap();
        let b: Vec<Tensor<f64>> = init_params(&[4, 8, 2], 7).unwrap();
        assert_eq!(a, b);
        let c: Vec<Tensor<f64>> = init_params(&[4, 8, 2], 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_follow_the_spec() {
        let p: Vec<Tensor<f64>> = init_params(&[4, 8, 2], 0).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].shape(), &[4, 8]);
        assert_eq!(p[1].shape(), &[1, 8]);
        assert_eq!(p[2].shape(), &[8, 2]);
        assert_eq!(p[3].shape(), &[1, 2]);
    }

    #[test]
    fn zero_width_layer_rejected() {
        assert!(init_params::<f64>(&[4, 0, 2], 0).is_err());
        assert!(init_params::<f64>(&[4], 0).is_err());
    }

    #[test]
    fn weight_scale_matches_fan_in_target() {
        // Sample-statistics oracle: the empirical std of a 64x64 block
        // should sit within ±20% of 1/sqrt(64) = 0.125.
        let p: Vec<Tensor<f64>> = init_params(&[64, 64], 3).unwrap();
        let w = &p[0];
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!(
            (std - 0.125).abs() < 0.2 * 0.125,
            "std {std} outside ±20% of 0.125"
        );
    }
}
