//! Bias-corrected Adam over parameter tensor lists.

use crate::scalar::Real;
use crate::tensor::dense::{Tensor, TensorError};

/// Moment accumulators and hyperparameters for one parameter list.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
    pub learning_rate: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Real> AdamState<T> {
    /// Accumulators mirror the parameter shapes; decay rates default to
    /// (0.9, 0.999) with stabilizer 1e-8.
    pub fn new(params: &[Tensor<T>], learning_rate: T) -> Self {
        Self {
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
            learning_rate,
            beta1: T::cast(0.9),
            beta2: T::cast(0.999),
            epsilon: T::cast(1e-8),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update, in place. Shapes of `params`,
    /// `grads` and the accumulators must all agree.
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TensorError::Invalid(format!(
                "adam: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.first.iter().zip(&self.second))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(TensorError::Invalid(format!(
                    "adam: parameter shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = T::from_u64(self.step).unwrap();
        let bc1 = T::one() - self.beta1.powf(t);
        let bc2 = T::one() - self.beta2.powf(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (T::one() - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (T::one() - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                p.data_mut()[i] =
                    p.data()[i] - self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::vector(vec![1.0, -2.0, 3.0])];
        let grads = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&params, 0.01);
        st.apply(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_magnitude_equals_learning_rate() {
        // Hand evaluation of the recurrence for g = 1, t = 1:
        //   m̂ = g, v̂ = g², Δ = lr·g/(|g| + eps) ≈ lr.
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&params, 0.01);
        st.apply(&mut params, &grads).unwrap();
        assert_abs_diff_eq!(params[0].item(), -0.01, epsilon = 1e-9);
    }

    #[test]
    fn identical_gradient_streams_give_bitwise_identical_trajectories() {
        let grads_stream: Vec<Vec<f64>> =
            vec![vec![0.3, -0.7], vec![0.1, 0.2], vec![-0.4, 0.9], vec![0.0, 0.05]];
        let run = || {
            let mut params = vec![Tensor::vector(vec![0.5, -0.5])];
            let mut st = AdamState::new(&params, 0.05);
            for g in &grads_stream {
                st.apply(&mut params, &[Tensor::vector(g.clone())]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![Tensor::vector(vec![1.0, 2.0])];
        let grads = vec![Tensor::vector(vec![1.0, 2.0, 3.0])];
        let mut st = AdamState::new(&params, 0.01);
        assert!(st.apply(&mut params, &grads).is_err());
    }
}
